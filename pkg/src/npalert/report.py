"""Evaluation reporting: expert-triple comparison, alert distributions,
bibliometric summaries.

The comparison implements the missed-alert rule: a reviewer triple counts as
missed when the chemical was never retrieved (neither extraction nor the
LOTUS dataset produced a relation from the organism's expansion) or when no
Strong or Medium chemical-literature evidence exists for it. Weak evidence
does not rescue a triple.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

from .extraction import AlertLevel, ChemicalNameError, LEVEL_RANK, RelationSource, \
    normalize_chemical_name
from .kg import EdgeLabel, KnowledgeGraph, NodeKind
from .literature import DocumentRef
from .lotus import LotusRelation, ReferenceStats, reference_stats

logger = logging.getLogger(__name__)


class ReportError(Exception):
    pass


class SystemLevel(str, Enum):
    STRONG = "Strong"
    MEDIUM = "Medium"
    WEAK = "Weak"
    MISSED = "Missed"


@dataclass(frozen=True)
class ExpertTriple:
    organism: str
    chemical: str
    isolation_ref: DocumentRef
    activity_ref: DocumentRef
    via_synonym: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.organism or not self.chemical:
            raise ValueError("expert triples need organism and chemical names")


@dataclass
class TripleStatus:
    triple: ExpertTriple
    relation_found_re: bool
    relation_found_lotus: bool
    system_level: SystemLevel
    diagnostics: list[str] = field(default_factory=list)


@dataclass
class ComparisonSummary:
    total: int
    retrieved: int
    retrieved_re: int
    missed: int


def _parse_ref(raw: str) -> DocumentRef:
    raw = raw.strip()
    if raw.isdigit():
        return DocumentRef(pmid=int(raw))
    return DocumentRef(doi=raw)


def load_expert_triples(path: str | Path) -> list[ExpertTriple]:
    """Read the delimited review table: organism, chemical, isolation ref,
    activity ref, optional synonym. Numeric refs are pmids, others DOIs."""
    triples = []
    with open(path, encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle, delimiter="\t")
        required = {"organism", "chemical", "isolation_ref", "activity_ref"}
        missing = required - set(reader.fieldnames or [])
        if missing:
            raise ReportError(f"expert triple file lacks columns {sorted(missing)}")
        for row in reader:
            triples.append(ExpertTriple(
                organism=row["organism"].strip(),
                chemical=row["chemical"].strip(),
                isolation_ref=_parse_ref(row["isolation_ref"]),
                activity_ref=_parse_ref(row["activity_ref"]),
                via_synonym=(row.get("via_synonym") or "").strip() or None,
            ))
    return triples


def load_aliases(path: str | Path) -> dict[str, str]:
    """Reviewer-editable spelling variants: alias <TAB> canonical name."""
    aliases = {}
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            alias, _, canonical = line.partition("\t")
            if canonical:
                aliases[normalize_chemical_name(alias).key] = canonical.strip()
    return aliases


def _chemical_key(name: str, aliases: Optional[dict[str, str]]) -> str:
    try:
        key = normalize_chemical_name(name).key
    except ChemicalNameError:
        return ""
    if aliases and key in aliases:
        key = normalize_chemical_name(aliases[key]).key
    return key


def compare_with_reference(
    graph: KnowledgeGraph,
    triples: Sequence[ExpertTriple],
    aliases: Optional[dict[str, str]] = None,
) -> tuple[list[TripleStatus], ComparisonSummary]:
    """Score each reviewer triple against the graph.

    For each triple: locate the chemical by normalised name, check which
    relation sources connect it to the organism's expansion, and take the
    maximum chemical-literature evidence level; then apply the missed rule.
    """
    statuses = []
    for triple in triples:
        diagnostics: list[str] = []
        found_re = False
        found_lotus = False
        max_level: Optional[AlertLevel] = None

        chemical_node = None
        key = _chemical_key(triple.chemical, aliases)
        if key:
            chemical_node = graph.find_chemical(key)
        if chemical_node is None:
            diagnostics.append(f"chemical {triple.chemical!r} not retrieved")

        anchors = graph.find_organism(triple.organism)
        if not anchors:
            diagnostics.append(f"organism {triple.organism!r} not in graph")

        if chemical_node is not None and anchors:
            subject_names = set()
            for anchor in anchors:
                closure = graph.organism_closure(anchor.id)
                for member_id in closure:
                    for relation_id in graph.in_neighbors(
                            member_id, EdgeLabel.RELATION_SUBJECT_ORGANISM):
                        relation = graph.node(relation_id)
                        if relation.attr("chemical_id") != chemical_node.id:
                            continue
                        source = RelationSource(relation.attr("source"))
                        if source is RelationSource.LOTUS_NPR:
                            found_lotus = True
                        else:
                            found_re = True
                        member_name = str(graph.node(member_id).attr("name"))
                        if member_id != anchor.id:
                            subject_names.add(member_name)
            if subject_names:
                diagnostics.append(
                    "relation found under synonym " + ", ".join(sorted(subject_names)))
            if triple.via_synonym:
                diagnostics.append(f"reviewers flagged synonym {triple.via_synonym}")
            for evidence_id in graph.in_neighbors(chemical_node.id,
                                                  EdgeLabel.EVIDENCE_SUBJECT):
                evidence = graph.node(evidence_id)
                if evidence.attr("kind") != "CL":
                    continue
                level = AlertLevel(evidence.attr("level"))
                if max_level is None or LEVEL_RANK[level] > LEVEL_RANK[max_level]:
                    max_level = level

        retrieved = found_re or found_lotus
        if retrieved and max_level in (AlertLevel.STRONG, AlertLevel.MEDIUM):
            system_level = SystemLevel(max_level.value)
        else:
            system_level = SystemLevel.MISSED
            if retrieved and max_level is None:
                diagnostics.append("no chemical-literature evidence extracted")
            if triple.isolation_ref.pmid is None or triple.activity_ref.pmid is None:
                diagnostics.append("UnreachableReference: review cites a non-indexed source")
        statuses.append(TripleStatus(
            triple=triple,
            relation_found_re=found_re,
            relation_found_lotus=found_lotus,
            system_level=system_level,
            diagnostics=diagnostics,
        ))

    summary = ComparisonSummary(
        total=len(statuses),
        retrieved=sum(1 for s in statuses if s.relation_found_re or s.relation_found_lotus),
        retrieved_re=sum(1 for s in statuses if s.relation_found_re),
        missed=sum(1 for s in statuses if s.system_level is SystemLevel.MISSED),
    )
    return statuses, summary


@dataclass
class AlertDistribution:
    organisms: list[str]
    rows: list[dict]

    def series(self) -> dict:
        """Plot-ready series: per kind, per level, one value per organism."""
        out: dict = {"organisms": self.organisms, "CL": {}, "OL": {}}
        for kind in ("CL", "OL"):
            for level in ("Strong", "Medium", "Weak"):
                out[kind][level] = [row[kind][level] for row in self.rows]
        return out


def alert_distribution_report(graph: KnowledgeGraph,
                              organisms: Sequence[str]) -> AlertDistribution:
    """Per-organism alert counts by kind and level, in input order."""
    rows = []
    for name in organisms:
        anchors = graph.find_organism(name)
        if not anchors:
            rows.append({"organism": name,
                         "CL": {l.value: 0 for l in AlertLevel},
                         "OL": {l.value: 0 for l in AlertLevel}})
            continue
        if len(anchors) > 1:
            logger.warning("organism %r is ambiguous in the graph; using %s",
                           name, anchors[0].natural_key)
        summary = graph.alert_summary(anchors[0].id)
        rows.append({"organism": name, "CL": summary["CL"], "OL": summary["OL"]})
    return AlertDistribution(organisms=list(organisms), rows=rows)


@dataclass
class BibliometricsReport:
    stats: ReferenceStats

    def series(self) -> dict:
        years = sorted(self.stats.year_histogram)
        return {
            "years": years,
            "counts": [self.stats.year_histogram[y] for y in years],
            "unknown_years": self.stats.unknown_years,
            "total": self.stats.total,
            "pmid_indexed_fraction": self.stats.pmid_indexed_fraction,
        }


def bibliometrics(relations: Sequence[LotusRelation]) -> BibliometricsReport:
    """Publication-year distribution and PubMed-indexed fraction of the
    dataset's references."""
    return BibliometricsReport(stats=reference_stats(list(relations)))
