"""Organism identification parsing, backbone alignment and synonym expansion.

User identifications arrive as free text, either binomial ("Aspergillus
calidoustus") or genus-only ("Aspergillus sp."). They are matched against a
Darwin-Core style backbone dump and expanded to the full set of names under
which the same organism may appear in the literature: the accepted name, all
of its synonyms, and for genus-level identifications every member species
plus their synonyms. Every downstream literature search runs over this
expanded name set.
"""

from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, Mapping, Optional

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = (
    "taxonID",
    "canonicalName",
    "scientificName",
    "taxonRank",
    "taxonomicStatus",
    "acceptedNameUsageID",
    "parentNameUsageID",
)

# Infraspecific rank markers we recognise but do not support. An
# identification carrying one is truncated to its binomial.
_INFRASPECIFIC_MARKERS = {"var", "subsp", "ssp", "f", "forma", "subvar"}

_ABBREV_GENUS_RE = re.compile(r"^[A-Z][a-z]?\.$")
_SP_MARKER_RE = re.compile(r"^spp?\.?$", re.IGNORECASE)


class TaxonomyError(Exception):
    """Base class for taxonomy failures."""


class EmptyInput(TaxonomyError):
    pass


class UnparseableIdentification(TaxonomyError):
    pass


class MissingColumn(TaxonomyError):
    def __init__(self, column: str):
        self.column = column
        super().__init__(f"backbone file is missing required column {column!r}")


class CyclicTaxonomy(TaxonomyError):
    def __init__(self, taxon_id: str):
        self.taxon_id = taxon_id
        super().__init__(f"acceptedNameUsageID chain revisits taxon {taxon_id!r}")


class IdentificationRank(str, Enum):
    SPECIES_LEVEL = "SpeciesLevel"
    GENUS_UNSPECIFIED = "GenusUnspecified"


class TaxonRank(str, Enum):
    GENUS = "Genus"
    SPECIES = "Species"
    OTHER = "Other"


class TaxonStatus(str, Enum):
    ACCEPTED = "Accepted"
    SYNONYM = "Synonym"
    DOUBTFUL = "Doubtful"


#: Sort order used when several records match one name.
_STATUS_ORDER = {TaxonStatus.ACCEPTED: 0, TaxonStatus.SYNONYM: 1, TaxonStatus.DOUBTFUL: 2}


class NameProvenance(str, Enum):
    INPUT_MATCH = "InputMatch"
    SYNONYM = "Synonym"
    GENUS_MEMBER = "GenusMember"
    GENUS_MEMBER_SYNONYM = "GenusMemberSynonym"


@dataclass(frozen=True)
class Identification:
    """A parsed user identification, species-level or genus-only."""

    raw: str
    genus: str
    species: Optional[str]
    rank: IdentificationRank

    def __post_init__(self) -> None:
        if not self.genus:
            raise ValueError("genus must be non-empty")
        genus_unspecified = self.species is None
        if genus_unspecified != (self.rank is IdentificationRank.GENUS_UNSPECIFIED):
            raise ValueError("rank must be GenusUnspecified iff species is absent")

    @property
    def query_name(self) -> str:
        if self.species is None:
            return self.genus
        return f"{self.genus} {self.species}"


@dataclass(frozen=True)
class TaxonRecord:
    taxon_id: str
    scientific_name: str
    canonical_name: str
    rank: TaxonRank
    status: TaxonStatus
    accepted_id: Optional[str] = None
    parent_id: Optional[str] = None


@dataclass(frozen=True)
class QuarantinedRow:
    line_no: int
    reason: str
    raw: str


@dataclass
class LoadReport:
    """Outcome of a backbone load: what was kept and what was set aside."""

    total_rows: int = 0
    loaded: int = 0
    quarantined: list[QuarantinedRow] = field(default_factory=list)

    @property
    def quarantined_count(self) -> int:
        return len(self.quarantined)


def normalize_name(name: str) -> str:
    """Normalise a taxon name for matching: lowercase, collapsed whitespace."""
    return " ".join(name.split()).lower()


def strip_authorship(scientific_name: str) -> str:
    """Reduce a scientific name with authorship to its canonical uninomial or
    binomial, e.g. "Sarocladium strictum (W. Gams) Summerb." -> "Sarocladium
    strictum". Everything after the epithet is treated as authorship."""
    tokens = scientific_name.split()
    if not tokens:
        return ""
    kept = [tokens[0]]
    if len(tokens) > 1 and tokens[1][:1].islower():
        kept.append(tokens[1])
    return " ".join(kept)


def parse_identification(
    raw: str,
    genus_abbreviations: Optional[Mapping[str, str]] = None,
) -> Identification:
    """Parse a free-text identification into genus/species and rank.

    A trailing "sp." marks an undetermined species within a genus. Abbreviated
    genus forms ("S. strictum") are only accepted when ``genus_abbreviations``
    supplies the expansion.
    """
    text = " ".join(raw.split())
    if not text:
        raise EmptyInput("identification is empty")
    tokens = text.split(" ")

    genus = tokens[0]
    if _ABBREV_GENUS_RE.match(genus):
        abbreviations = genus_abbreviations or {}
        expanded = abbreviations.get(genus) or abbreviations.get(genus.rstrip("."))
        if not expanded:
            raise UnparseableIdentification(
                f"abbreviated genus {genus!r} has no expansion dictionary entry"
            )
        genus = expanded

    rest = tokens[1:]
    if rest and _SP_MARKER_RE.match(rest[-1]):
        if len(rest) > 1:
            raise UnparseableIdentification(f"cannot parse {raw!r}")
        return Identification(raw=raw, genus=genus, species=None,
                              rank=IdentificationRank.GENUS_UNSPECIFIED)

    if not rest:
        # A bare genus name is a genus-level identification.
        return Identification(raw=raw, genus=genus, species=None,
                              rank=IdentificationRank.GENUS_UNSPECIFIED)

    species = rest[0]
    if len(rest) >= 2:
        extra = rest[1]
        if extra.rstrip(".").lower() in _INFRASPECIFIC_MARKERS:
            # Infraspecific ranks are unsupported; search at species level.
            logger.warning("truncating infraspecific identification %r to binomial", raw)
        elif extra[:1].isupper() or extra.startswith("("):
            pass  # authorship, stripped
        else:
            raise UnparseableIdentification(
                f"cannot parse {raw!r}: {len(tokens)} tokens without a recognised marker"
            )
    return Identification(raw=raw, genus=genus, species=species,
                          rank=IdentificationRank.SPECIES_LEVEL)


class TaxonomyIndex:
    """Immutable lookup structure over backbone records.

    Built once by :func:`load_backbone`; safe for concurrent reads.
    """

    def __init__(self, records: Mapping[str, TaxonRecord]):
        self._records: dict[str, TaxonRecord] = dict(records)
        self._by_canonical: dict[str, list[str]] = {}
        self._synonyms_of: dict[str, list[str]] = {}
        self._children_of: dict[str, list[str]] = {}
        for taxon_id in sorted(self._records):
            record = self._records[taxon_id]
            self._by_canonical.setdefault(normalize_name(record.canonical_name), []).append(taxon_id)
            if record.accepted_id and record.accepted_id != taxon_id:
                self._synonyms_of.setdefault(record.accepted_id, []).append(taxon_id)
            if record.parent_id:
                self._children_of.setdefault(record.parent_id, []).append(taxon_id)

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, taxon_id: str) -> bool:
        return taxon_id in self._records

    def __iter__(self) -> Iterator[TaxonRecord]:
        return iter(self._records.values())

    def record(self, taxon_id: str) -> TaxonRecord:
        return self._records[taxon_id]

    def by_canonical_name(self, name: str) -> list[TaxonRecord]:
        ids = self._by_canonical.get(normalize_name(name), [])
        return [self._records[i] for i in ids]

    def synonyms_of(self, taxon_id: str) -> list[TaxonRecord]:
        """Records whose acceptedNameUsageID points directly at ``taxon_id``."""
        return [self._records[i] for i in self._synonyms_of.get(taxon_id, [])]

    def children_of(self, taxon_id: str) -> list[TaxonRecord]:
        return [self._records[i] for i in self._children_of.get(taxon_id, [])]


_STATUS_VALUES = {
    "accepted": TaxonStatus.ACCEPTED,
    "synonym": TaxonStatus.SYNONYM,
    "doubtful": TaxonStatus.DOUBTFUL,
}

_RANK_VALUES = {"genus": TaxonRank.GENUS, "species": TaxonRank.SPECIES}


def load_backbone(source: str | Path) -> tuple[TaxonomyIndex, LoadReport]:
    """Load a tab-separated backbone dump into a :class:`TaxonomyIndex`.

    Rows violating record invariants (unknown status, synonym without an
    accepted id, dangling references, wrong field count) are quarantined with
    a warning rather than aborting the load; real backbone dumps contain
    inconsistencies. Raises :class:`MissingColumn` if the header is unusable.
    """
    report = LoadReport()
    staged: dict[str, TaxonRecord] = {}
    lines: dict[str, int] = {}

    with open(source, encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle, delimiter="\t")
        try:
            header = next(reader)
        except StopIteration:
            raise MissingColumn(REQUIRED_COLUMNS[0]) from None
        positions = {}
        for column in REQUIRED_COLUMNS:
            if column not in header:
                raise MissingColumn(column)
            positions[column] = header.index(column)

        def quarantine(line_no: int, reason: str, row: list[str]) -> None:
            report.quarantined.append(QuarantinedRow(line_no, reason, "\t".join(row)))
            logger.warning("backbone line %d quarantined: %s", line_no, reason)

        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            report.total_rows += 1
            if len(row) < len(header):
                quarantine(line_no, f"malformed row: expected {len(header)} fields, got {len(row)}", row)
                continue
            get = lambda col: row[positions[col]].strip()  # noqa: E731
            taxon_id = get("taxonID")
            if not taxon_id:
                quarantine(line_no, "missing taxonID", row)
                continue
            if taxon_id in staged:
                quarantine(line_no, f"duplicate taxonID {taxon_id!r}", row)
                continue
            status = _STATUS_VALUES.get(get("taxonomicStatus").lower())
            if status is None:
                quarantine(line_no, f"unknown taxonomicStatus {get('taxonomicStatus')!r}", row)
                continue
            canonical = get("canonicalName") or strip_authorship(get("scientificName"))
            if not canonical:
                quarantine(line_no, "no canonical or scientific name", row)
                continue
            accepted_id = get("acceptedNameUsageID") or None
            if status is TaxonStatus.SYNONYM and not accepted_id:
                quarantine(line_no, "synonym without acceptedNameUsageID", row)
                continue
            if status is TaxonStatus.ACCEPTED and accepted_id == taxon_id:
                accepted_id = None
            if status is TaxonStatus.ACCEPTED and accepted_id:
                quarantine(line_no, "accepted record pointing at another accepted id", row)
                continue
            staged[taxon_id] = TaxonRecord(
                taxon_id=taxon_id,
                scientific_name=get("scientificName") or canonical,
                canonical_name=canonical,
                rank=_RANK_VALUES.get(get("taxonRank").lower(), TaxonRank.OTHER),
                status=status,
                accepted_id=accepted_id,
                parent_id=get("parentNameUsageID") or None,
            )
            lines[taxon_id] = line_no

    # Dangling accepted/parent references cascade, so iterate to a fixpoint.
    while True:
        dangling = [
            r for r in staged.values()
            if (r.accepted_id and r.accepted_id not in staged)
            or (r.parent_id and r.parent_id not in staged)
        ]
        if not dangling:
            break
        for record in dangling:
            del staged[record.taxon_id]
            report.quarantined.append(QuarantinedRow(
                lines[record.taxon_id],
                f"dangling reference from taxon {record.taxon_id!r}",
                record.canonical_name,
            ))
            logger.warning("backbone taxon %s quarantined: dangling reference", record.taxon_id)

    report.loaded = len(staged)
    return TaxonomyIndex(staged), report


def resolve(ident: Identification, index: TaxonomyIndex) -> list[TaxonRecord]:
    """Match an identification against the backbone by canonical name.

    Returns all matches (homonyms included) ordered Accepted < Synonym <
    Doubtful; an empty list means no taxon match.
    """
    wanted_rank = (
        TaxonRank.SPECIES
        if ident.rank is IdentificationRank.SPECIES_LEVEL
        else TaxonRank.GENUS
    )
    matches = [r for r in index.by_canonical_name(ident.query_name) if r.rank is wanted_rank]
    matches.sort(key=lambda r: (_STATUS_ORDER[r.status], r.taxon_id))
    return matches


@dataclass
class TaxonExpansion:
    """The resolved name set for one identification, with per-name provenance."""

    input: Identification
    matched: list[TaxonRecord]
    provenance: dict[str, NameProvenance]
    warnings: list[str] = field(default_factory=list)

    @property
    def names(self) -> frozenset[str]:
        return frozenset(self.provenance)


def accepted_root(record: TaxonRecord, index: TaxonomyIndex) -> TaxonRecord:
    seen = {record.taxon_id}
    current = record
    while current.accepted_id:
        if current.accepted_id in seen:
            raise CyclicTaxonomy(current.accepted_id)
        seen.add(current.accepted_id)
        current = index.record(current.accepted_id)
    return current


def _synonym_closure(root: TaxonRecord, index: TaxonomyIndex) -> list[TaxonRecord]:
    """All records whose accepted chain terminates at ``root``, excluding it."""
    out: list[TaxonRecord] = []
    queue = [root.taxon_id]
    seen = {root.taxon_id}
    while queue:
        current = queue.pop(0)
        for synonym in index.synonyms_of(current):
            if synonym.taxon_id in seen:
                continue
            seen.add(synonym.taxon_id)
            out.append(synonym)
            queue.append(synonym.taxon_id)
    return out


def expand_synonyms(
    matched: TaxonRecord,
    index: TaxonomyIndex,
    rank: IdentificationRank,
    identification: Optional[Identification] = None,
    max_genus_members: Optional[int] = None,
) -> TaxonExpansion:
    """Expand a matched taxon to all names the literature may use for it.

    Species-level: the accepted taxon's canonical name plus every synonym's,
    resolving through the accepted chain if the match was itself a synonym.
    Genus-level: the genus name itself, every member species and each
    species' synonyms. Doubtful records participate (recall over precision).
    """
    if matched.taxon_id not in index:
        raise TaxonomyError(f"taxon {matched.taxon_id!r} is not in the index")
    ident = identification or Identification(
        raw=matched.canonical_name,
        genus=matched.canonical_name.split()[0],
        species=None if rank is IdentificationRank.GENUS_UNSPECIFIED
        else " ".join(matched.canonical_name.split()[1:]) or None,
        rank=rank,
    )

    provenance: dict[str, NameProvenance] = {}
    records: list[TaxonRecord] = []
    warnings: list[str] = []

    def add(record: TaxonRecord, tag: NameProvenance) -> None:
        records.append(record)
        provenance.setdefault(record.canonical_name, tag)

    add(matched, NameProvenance.INPUT_MATCH)

    if rank is IdentificationRank.SPECIES_LEVEL:
        root = accepted_root(matched, index)
        if root.taxon_id != matched.taxon_id:
            add(root, NameProvenance.SYNONYM)
        for synonym in _synonym_closure(root, index):
            if synonym.taxon_id != matched.taxon_id:
                add(synonym, NameProvenance.SYNONYM)
    else:
        members = [c for c in index.children_of(matched.taxon_id) if c.rank is TaxonRank.SPECIES]
        members.sort(key=lambda r: r.taxon_id)
        if max_genus_members is not None and len(members) > max_genus_members:
            warnings.append(
                f"genus {matched.canonical_name!r} has {len(members)} member species; "
                f"capped to {max_genus_members}"
            )
            logger.warning("%s", warnings[-1])
            members = members[:max_genus_members]
        for member in members:
            if member.status is TaxonStatus.SYNONYM:
                add(member, NameProvenance.GENUS_MEMBER_SYNONYM)
                continue
            add(member, NameProvenance.GENUS_MEMBER)
            for synonym in _synonym_closure(member, index):
                add(synonym, NameProvenance.GENUS_MEMBER_SYNONYM)

    return TaxonExpansion(input=ident, matched=records, provenance=provenance, warnings=warnings)
