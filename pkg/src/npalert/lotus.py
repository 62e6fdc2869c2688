"""Organism-chemical relations from the LOTUS dataset.

The default ingestion path is an offline dump (a delimited table), which
keeps runs deterministic; a SPARQL endpoint can be queried instead when
freshness matters. Chemical identity is keyed by normalised label rather
than structure identifier so database relations merge with text-extracted
ones; structure ids are kept as metadata.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional

from .extraction import ChemicalNameError, normalize_chemical_name
from .literature import DocumentRef
from .taxonomy import normalize_name

logger = logging.getLogger(__name__)

DUMP_COLUMNS = ("organism_name", "chemical_label", "structure_id", "reference_doi",
                "reference_pmid", "reference_year")


class LotusError(Exception):
    pass


class SourceUnavailable(LotusError):
    pass


@dataclass(frozen=True)
class LotusRelation:
    organism_name: str
    chemical_display: str
    chemical_key: str
    reference: DocumentRef
    reference_year: Optional[int] = None
    structure_id: Optional[str] = None


@dataclass
class IngestReport:
    read: int = 0
    malformed: int = 0


def _dedup(relations: Iterable[LotusRelation]) -> list[LotusRelation]:
    seen: set[tuple] = set()
    out = []
    for relation in relations:
        key = (normalize_name(relation.organism_name), relation.chemical_key,
               relation.reference.key())
        if key in seen:
            continue
        seen.add(key)
        out.append(relation)
    return out


def load_dump(path: str | Path, names: Optional[set[str]] = None,
              report: Optional[IngestReport] = None) -> list[LotusRelation]:
    """Exact-match lookup over a dump file for every name in the set; with
    ``names=None`` every well-formed row is returned (bibliometrics mode)."""
    report = report if report is not None else IngestReport()
    wanted = None if names is None else {normalize_name(n) for n in names}
    found: list[LotusRelation] = []
    try:
        handle = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise SourceUnavailable(f"cannot read dump {path}: {exc}") from exc
    with handle:
        reader = csv.DictReader(handle, delimiter="\t")
        missing = [c for c in DUMP_COLUMNS[:2] if c not in (reader.fieldnames or [])]
        if missing:
            raise SourceUnavailable(f"dump {path} lacks columns {missing}")
        for row in reader:
            report.read += 1
            relation = _row_to_relation(row)
            if relation is None:
                report.malformed += 1
                continue
            if wanted is None or normalize_name(relation.organism_name) in wanted:
                found.append(relation)
    return _dedup(found)


def _row_to_relation(row: dict) -> Optional[LotusRelation]:
    organism = (row.get("organism_name") or "").strip()
    label = (row.get("chemical_label") or "").strip()
    doi = (row.get("reference_doi") or "").strip() or None
    pmid_raw = (row.get("reference_pmid") or "").strip()
    year_raw = (row.get("reference_year") or "").strip()
    if not organism or not label:
        return None
    try:
        chemical = normalize_chemical_name(label)
    except ChemicalNameError:
        return None
    try:
        pmid = int(pmid_raw) if pmid_raw else None
        year = int(year_raw) if year_raw else None
    except ValueError:
        return None
    if pmid is None and doi is None:
        return None
    try:
        reference = DocumentRef(pmid=pmid, doi=doi)
    except ValueError:
        return None
    return LotusRelation(
        organism_name=organism,
        chemical_display=chemical.display,
        chemical_key=chemical.key,
        reference=reference,
        reference_year=year,
        structure_id=(row.get("structure_id") or "").strip() or None,
    )


def sparql_query_template() -> str:
    return resources.files("npalert").joinpath("queries/lotus_relations.rq").read_text(encoding="utf-8")


def query_endpoint(endpoint_url: str, names: set[str], timeout: float = 120.0,
                   report: Optional[IngestReport] = None) -> list[LotusRelation]:
    """Query a SPARQL endpoint with the shipped template, one name at a time."""
    import requests

    report = report if report is not None else IngestReport()
    template = sparql_query_template()
    found: list[LotusRelation] = []
    for name in sorted(names):
        query = template.replace("$name", '"' + name.replace('"', '\\"') + '"')
        try:
            response = requests.get(
                endpoint_url,
                params={"query": query, "format": "json"},
                headers={"Accept": "application/sparql-results+json"},
                timeout=timeout,
            )
        except requests.RequestException as exc:
            raise SourceUnavailable(str(exc)) from exc
        if response.status_code != 200:
            raise SourceUnavailable(f"endpoint returned {response.status_code}")
        for binding in response.json().get("results", {}).get("bindings", []):
            report.read += 1
            relation = _binding_to_relation(binding)
            if relation is None:
                report.malformed += 1
                continue
            found.append(relation)
    return _dedup(found)


def _binding_to_relation(binding: dict) -> Optional[LotusRelation]:
    def value(key: str) -> str:
        return (binding.get(key) or {}).get("value", "").strip()

    row = {
        "organism_name": value("organismName"),
        "chemical_label": value("chemicalLabel"),
        "structure_id": value("structure"),
        "reference_doi": value("refDoi"),
        "reference_pmid": value("refPmid"),
        "reference_year": value("refYear")[:4],
    }
    return _row_to_relation(row)


def fetch_relations(
    names: set[str],
    dump_path: Optional[str | Path] = None,
    endpoint_url: Optional[str] = None,
    report: Optional[IngestReport] = None,
) -> list[LotusRelation]:
    """Fetch relations for a name set from the configured source.

    The dump is preferred when both are configured; results are deduplicated
    on (organism, chemical key, reference).
    """
    if dump_path is not None:
        return load_dump(dump_path, names, report=report)
    if endpoint_url is not None:
        return query_endpoint(endpoint_url, names, report=report)
    raise SourceUnavailable("no LOTUS source configured (dump path or endpoint URL)")


@dataclass
class ReferenceStats:
    year_histogram: dict[int, int]
    unknown_years: int
    total: int
    with_pmid: int

    @property
    def pmid_indexed_fraction(self) -> Optional[float]:
        if self.total == 0:
            return None
        return self.with_pmid / self.total


def reference_stats(relations: list[LotusRelation]) -> ReferenceStats:
    """Publication-year histogram and the fraction of references with a pmid."""
    histogram: dict[int, int] = {}
    unknown = 0
    with_pmid = 0
    for relation in relations:
        if relation.reference_year is None:
            unknown += 1
        else:
            histogram[relation.reference_year] = histogram.get(relation.reference_year, 0) + 1
        if relation.reference.pmid is not None:
            with_pmid += 1
    return ReferenceStats(
        year_histogram=dict(sorted(histogram.items())),
        unknown_years=unknown,
        total=len(relations),
        with_pmid=with_pmid,
    )
