"""LLM-backed extraction of natural-product relations and activity evidence.

Two prompt suites drive this module. The relation suite asks a backend to
list (organism, chemical) isolation pairs from a passage. The evidence suite
is two-staged: first extract a rationale for antibiotic activity of a
subject (or report that none exists), then map that rationale to one of the
three alert levels. Parsers are deliberately lenient; anything unparseable
falls toward reviewer attention, never silently away from it.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

from .backends import (
    ExtractionLog,
    LlmBackend,
    OutputUnparseable,
    PromptTemplate,
    call_backend,
    load_prompt,
    prompt_digest,
)
from .literature import DocumentRef

logger = logging.getLogger(__name__)


class RelationSource(str, Enum):
    LOTUS_NPR = "LotusNPR"
    TIAB_NPR = "TiabNPR"
    CHUNK_NPR = "ChunkNPR"


class EvidenceKind(str, Enum):
    OL = "OL"  # found in the organism's literature
    CL = "CL"  # found in the chemical's literature


class AlertLevel(str, Enum):
    STRONG = "Strong"
    MEDIUM = "Medium"
    WEAK = "Weak"


#: Strong outranks Medium outranks Weak when aggregating evidence.
LEVEL_RANK = {AlertLevel.STRONG: 2, AlertLevel.MEDIUM: 1, AlertLevel.WEAK: 0}


class SubjectKind(str, Enum):
    ORGANISM = "Organism"
    CHEMICAL = "Chemical"


class ChemicalNameError(Exception):
    pass


@dataclass(frozen=True)
class ChemicalName:
    display: str
    key: str


_TRAILING_PUNCT_RE = re.compile(r"[\s.,;:]+$")


def normalize_chemical_name(raw: str) -> ChemicalName:
    """Trim, collapse whitespace and strip trailing punctuation, keeping a
    display form and a lowercase key for merging across sources."""
    display = _TRAILING_PUNCT_RE.sub("", " ".join(raw.split()))
    if not display:
        raise ChemicalNameError(f"chemical name {raw!r} is empty after normalization")
    return ChemicalName(display=display, key=display.lower())


def chemical_query_names(display: str) -> list[str]:
    """Names to search literature under: the full surface form plus, for
    enumerations like "Altertoxin I, II, III", each comma-split variant."""
    names = [display]
    if "," in display:
        parts = [p.strip() for p in display.split(",")]
        parts = [p for p in parts if p]
        if len(parts) > 1:
            head = parts[0].split()
            prefix = " ".join(head[:-1])
            for part in parts:
                # Bare enumerator tokens ("II") inherit the leading words.
                name = part if " " in part or not prefix else f"{prefix} {part}"
                if name not in names:
                    names.append(name)
    return names


@dataclass(frozen=True)
class NPRelationCandidate:
    organism_mention: str
    chemical: ChemicalName
    source: RelationSource
    doc: DocumentRef
    passage_id: str
    off_target: bool = False
    backend_identity: str = ""
    prompt_digest: str = ""

    def __post_init__(self) -> None:
        if self.source is RelationSource.LOTUS_NPR:
            raise ValueError("extraction candidates are TiabNPR or ChunkNPR")


@dataclass
class ActivityEvidence:
    subject_kind: SubjectKind
    subject_id: str
    kind: EvidenceKind
    level: AlertLevel
    rationale: str
    doc: DocumentRef
    parse_warnings: list[str] = field(default_factory=list)
    backend_identity: str = ""
    prompt_digest: str = ""

    def __post_init__(self) -> None:
        if (self.kind is EvidenceKind.OL) != (self.subject_kind is SubjectKind.ORGANISM):
            raise ValueError("OL evidence must have an Organism subject, CL a Chemical one")
        if self.level in (AlertLevel.STRONG, AlertLevel.MEDIUM) and not self.rationale:
            raise ValueError(f"{self.level.value} evidence requires a rationale")


@dataclass(frozen=True)
class PromptSuite:
    """The three templates one backend is driven with."""

    relation: PromptTemplate
    evidence: PromptTemplate
    classification: PromptTemplate

    @classmethod
    def default(cls) -> "PromptSuite":
        return cls(
            relation=load_prompt("relation_extraction"),
            evidence=load_prompt("evidence_extraction"),
            classification=load_prompt("alert_classification"),
        )


_BULLET_RE = re.compile(r"^\s*(?:[-*•]+|\(?\d+[.):]?)\s*")
_NONE_RE = re.compile(r"^\s*none\b", re.IGNORECASE)


def _normalize_mention(name: str) -> str:
    return " ".join(name.split()).lower()


def extract_relations(
    passage: str,
    organism_names: Sequence[str],
    backend: LlmBackend,
    doc: DocumentRef,
    source: RelationSource = RelationSource.TIAB_NPR,
    passage_id: str = "abstract",
    suite: Optional[PromptSuite] = None,
    log: Optional[ExtractionLog] = None,
    max_output: int = 512,
) -> list[NPRelationCandidate]:
    """Prompt for (organism, chemical) isolation pairs in a passage.

    Output lines are parsed leniently (numbering and bullets tolerated);
    pairs naming an organism outside ``organism_names`` are kept but flagged
    off-target, since the text may use a spelling the taxonomy missed.
    """
    if not passage.strip():
        raise ValueError("passage must be non-empty")
    suite = suite or PromptSuite.default()
    prompt = suite.relation.render(text=passage, names="\n".join(sorted(organism_names)))
    response = call_backend(backend, prompt, max_output, log=log, purpose="relation-extraction")
    known = {_normalize_mention(n) for n in organism_names}
    candidates: list[NPRelationCandidate] = []
    seen: set[tuple[str, str]] = set()
    parsed_any = False
    for line in response.splitlines():
        line = _BULLET_RE.sub("", line).strip()
        if not line:
            continue
        if _NONE_RE.match(line):
            parsed_any = True
            continue
        if "|" not in line:
            continue
        organism_part, _, chemical_part = line.partition("|")
        organism_mention = " ".join(organism_part.split())
        try:
            chemical = normalize_chemical_name(chemical_part)
        except ChemicalNameError:
            continue
        if not organism_mention:
            continue
        parsed_any = True
        dedup_key = (_normalize_mention(organism_mention), chemical.key)
        if dedup_key in seen:
            continue
        seen.add(dedup_key)
        candidates.append(NPRelationCandidate(
            organism_mention=organism_mention,
            chemical=chemical,
            source=source,
            doc=doc,
            passage_id=passage_id,
            off_target=_normalize_mention(organism_mention) not in known,
            backend_identity=backend.identity,
            prompt_digest=prompt_digest(prompt),
        ))
    if not parsed_any and response.strip():
        raise OutputUnparseable(
            f"no relation lines recognised in backend output for {doc} {passage_id}"
        )
    return candidates


_NO_EVIDENCE_RE = re.compile(r"\bno evidence\b", re.IGNORECASE)


@dataclass(frozen=True)
class RationaleResult:
    rationale: Optional[str]
    prompt_digest: str
    backend_identity: str


def extract_activity_evidence(
    text: str,
    subject: str,
    backend: LlmBackend,
    suite: Optional[PromptSuite] = None,
    log: Optional[ExtractionLog] = None,
    max_output: int = 512,
) -> RationaleResult:
    """Stage one: ask whether the text evidences antibiotic activity of the
    subject. Returns the quoted rationale, or ``rationale=None`` when the
    backend reports no evidence."""
    if not text.strip():
        raise ValueError("text must be non-empty")
    suite = suite or PromptSuite.default()
    prompt = suite.evidence.render(text=text, subject=subject)
    response = call_backend(backend, prompt, max_output, log=log, purpose="evidence-extraction")
    digest = prompt_digest(prompt)
    if not response.strip():
        raise OutputUnparseable(f"empty evidence response for subject {subject!r}")
    if _NO_EVIDENCE_RE.search(response):
        return RationaleResult(rationale=None, prompt_digest=digest,
                               backend_identity=backend.identity)
    return RationaleResult(rationale=response.strip(), prompt_digest=digest,
                           backend_identity=backend.identity)


_LEVEL_TOKEN_RE = re.compile(r"\b(strong|medium|weak)\b", re.IGNORECASE)


def classify_alert_level(
    rationale: str,
    backend: LlmBackend,
    suite: Optional[PromptSuite] = None,
    log: Optional[ExtractionLog] = None,
    max_output: int = 16,
) -> tuple[AlertLevel, list[str]]:
    """Stage two: map a rationale to Strong, Medium or Weak.

    The level token is accepted case-insensitively anywhere in the first
    output line. Anything else falls back to Medium with a parse warning;
    an alarm system fails toward reviewer attention, not away from it.
    """
    if not rationale.strip():
        raise ValueError("rationale must be non-empty")
    suite = suite or PromptSuite.default()
    prompt = suite.classification.render(rationale=rationale)
    response = call_backend(backend, prompt, max_output, log=log, purpose="alert-classification")
    first_line = response.splitlines()[0] if response.splitlines() else ""
    match = _LEVEL_TOKEN_RE.search(first_line)
    if match:
        return AlertLevel(match.group(1).capitalize()), []
    warning = f"unparseable level output {first_line!r}; falling back to Medium"
    logger.warning("%s", warning)
    return AlertLevel.MEDIUM, [warning]
