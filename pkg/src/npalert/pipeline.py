"""Orchestration of the nine-step alarm pipeline with checkpointed resume.

For each identification: taxonomy expansion (1), organism literature
retrieval (2), the activity gate (3) and OL evidence extraction (4), the
isolation-relation gate (5) and relation extraction merged with the LOTUS
dataset (6). Chemicals accumulated in the graph then drive the mirrored
steps: chemical literature retrieval (7), the activity gate again (8) and
CL evidence extraction (9). Everything lands in the knowledge graph through
natural-key upserts, so reruns and resumes never inflate alert counts.

Per-document and per-call failures are recorded in the run manifest and
skipped; only configuration and backbone errors abort a run.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional

from . import backends as backends_mod
from . import extraction, filtering, lotus, taxonomy
from .extraction import AlertLevel, EvidenceKind, RelationSource
from .kg import EdgeLabel, KnowledgeGraph, NodeKind
from .literature import (
    Document,
    DocumentRef,
    EUtilsClient,
    LiteratureError,
    ResponseCache,
    SearchQuery,
    chunk_fulltext,
)

logger = logging.getLogger(__name__)

MANIFEST_FORMAT = "npalert-run/1"
CONFIG_SNAPSHOT = "config.json"
MANIFEST_FILE = "manifest.json"
KG_EXPORT = "kg.ndjson"
EXTRACTION_LOG = "extraction.log"
IDENTIFICATIONS_FILE = "identifications.txt"


class PipelineError(Exception):
    pass


class ConfigError(PipelineError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"config key {key!r}: {message}")


class ConfigDrift(PipelineError):
    pass


class MissingCheckpoint(PipelineError):
    pass


class AblationMode(str, Enum):
    FULL = "Full"
    LOTUS_ONLY = "LotusOnly"
    RE_ONLY = "ReOnly"


@dataclass
class PipelineConfig:
    """Everything a run needs; validated before any work starts."""

    backbone_path: str
    re_backend: dict
    evidence_backend: dict
    eutils: dict = field(default_factory=dict)
    cache_dir: Optional[str] = None
    activity_model_path: Optional[str] = None
    npr_model_path: Optional[str] = None
    activity_threshold: Optional[float] = None
    npr_threshold: Optional[float] = None
    lotus_dump: Optional[str] = None
    lotus_endpoint: Optional[str] = None
    organism_fulltext: bool = True
    chemical_fulltext: bool = False
    max_chunk_tokens: int = 400
    chunk_overlap: int = 50
    genus_expansion_cap: Optional[int] = None
    genus_abbreviations: dict = field(default_factory=dict)
    chemical_stoplist: list = field(default_factory=list)
    parallelism: int = 1
    ablation: AblationMode = AblationMode.FULL

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown configuration key")
        values = dict(raw)
        if "ablation" in values:
            try:
                values["ablation"] = AblationMode(values["ablation"])
            except ValueError:
                raise ConfigError("ablation", f"must be one of {[m.value for m in AblationMode]}")
        return cls(**values)

    def to_dict(self) -> dict:
        out = {}
        for name in self.__dataclass_fields__:  # type: ignore[attr-defined]
            value = getattr(self, name)
            out[name] = value.value if isinstance(value, Enum) else value
        return out

    def digest(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    def validate(self) -> None:
        if self.parallelism < 1:
            raise ConfigError("parallelism", "must be >= 1")
        if not Path(self.backbone_path).exists():
            raise ConfigError("backbone_path", f"{self.backbone_path} does not exist")
        for key in ("activity_model_path", "npr_model_path", "lotus_dump"):
            value = getattr(self, key)
            if value is not None and not Path(value).exists():
                raise ConfigError(key, f"{value} does not exist")
        for key in ("re_backend", "evidence_backend"):
            entry = getattr(self, key)
            if not isinstance(entry, dict) or "kind" not in entry:
                raise ConfigError(key, "must be a mapping with a 'kind'")
            if entry.get("kind") == "stub" and not Path(entry.get("script", "")).exists():
                raise ConfigError(key, f"stub script {entry.get('script')!r} does not exist")
        if self.chunk_overlap < 0 or self.max_chunk_tokens <= self.chunk_overlap:
            raise ConfigError("max_chunk_tokens", "must exceed chunk_overlap >= 0")


@dataclass
class RunManifest:
    run_id: str
    config_digest: str
    counters: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    completed: bool = False

    def bump(self, counter: str, amount: int = 1) -> None:
        self.counters[counter] = self.counters.get(counter, 0) + amount

    def mark_done(self, step: str, unit: str) -> None:
        units = self.checkpoints.setdefault(step, [])
        if unit not in units:
            units.append(unit)

    def is_done(self, step: str, unit: str) -> bool:
        return unit in self.checkpoints.get(step, [])

    def record_failure(self, stage: str, unit: str, error: Exception) -> None:
        self.failures.append({"stage": stage, "unit": unit,
                              "error": f"{type(error).__name__}: {error}"})
        self.bump("failures")

    def to_dict(self) -> dict:
        return {
            "format": MANIFEST_FORMAT,
            "run_id": self.run_id,
            "config_digest": self.config_digest,
            "counters": dict(sorted(self.counters.items())),
            "checkpoints": {k: sorted(v) for k, v in sorted(self.checkpoints.items())},
            "failures": self.failures,
            "completed": self.completed,
        }

    def save(self, path: Path) -> None:
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
        tmp.replace(path)

    @classmethod
    def load(cls, path: Path) -> "RunManifest":
        raw = json.loads(path.read_text(encoding="utf-8"))
        if raw.get("format") != MANIFEST_FORMAT:
            raise PipelineError(f"unsupported manifest format {raw.get('format')!r}")
        return cls(
            run_id=raw["run_id"],
            config_digest=raw["config_digest"],
            counters=raw.get("counters", {}),
            checkpoints=raw.get("checkpoints", {}),
            failures=raw.get("failures", []),
            completed=raw.get("completed", False),
        )


class PipelineRunner:
    """One run over a list of identifications, writing into ``run_dir``."""

    def __init__(
        self,
        config: PipelineConfig,
        run_dir: str | Path,
        resuming: bool = False,
        run_id: Optional[str] = None,
        transport: Optional[Callable] = None,
    ):
        config.validate()
        self.config = config
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)

        self.index, backbone_report = taxonomy.load_backbone(config.backbone_path)
        if backbone_report.quarantined_count:
            logger.warning("backbone load quarantined %d rows", backbone_report.quarantined_count)

        cache = None
        if config.cache_dir:
            cache = ResponseCache(config.cache_dir)
        self.client = EUtilsClient(
            transport=transport, cache=cache, **config.eutils,
        )
        self.log = backends_mod.ExtractionLog(self.run_dir / EXTRACTION_LOG)
        self.re_backend = backends_mod.build_backend(config.re_backend)
        self.evidence_backend = backends_mod.build_backend(config.evidence_backend)
        self.suite = extraction.PromptSuite.default()

        self.activity_model = self._load_model(config.activity_model_path,
                                               config.activity_threshold, "activity")
        self.npr_model = self._load_model(config.npr_model_path,
                                          config.npr_threshold, "npr")
        self.stoplist = {k.lower() for k in config.chemical_stoplist}

        manifest_path = self.run_dir / MANIFEST_FILE
        if resuming:
            if not manifest_path.exists():
                raise MissingCheckpoint(f"no manifest in {self.run_dir}")
            self.manifest = RunManifest.load(manifest_path)
            if self.manifest.config_digest != config.digest():
                raise ConfigDrift(
                    f"run was started with config {self.manifest.config_digest}, "
                    f"got {config.digest()}"
                )
            kg_path = self.run_dir / KG_EXPORT
            self.graph = KnowledgeGraph.import_(kg_path) if kg_path.exists() else KnowledgeGraph()
        else:
            self.manifest = RunManifest(
                run_id=run_id or uuid.uuid4().hex[:12],
                config_digest=config.digest(),
            )
            self.graph = KnowledgeGraph()
            (self.run_dir / CONFIG_SNAPSHOT).write_text(
                json.dumps(config.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
        self._manifest_lock = threading.Lock()

    @staticmethod
    def _load_model(path: Optional[str], threshold: Optional[float], name: str):
        if not path:
            logger.warning("no %s filter model configured; filtering is fail-open", name)
            return None
        model = filtering.load_model(path)
        if threshold is not None:
            model.threshold = threshold
        return model

    # -- checkpointing ------------------------------------------------------

    def _checkpoint(self, step: str, unit: str) -> None:
        with self._manifest_lock:
            self.manifest.mark_done(step, unit)
            self.graph.export(self.run_dir / KG_EXPORT)
            self.manifest.save(self.run_dir / MANIFEST_FILE)

    def _bump(self, counter: str, amount: int = 1) -> None:
        with self._manifest_lock:
            self.manifest.bump(counter, amount)

    def _fail(self, stage: str, unit: str, error: Exception) -> None:
        logger.warning("%s failed for %s: %s", stage, unit, error)
        with self._manifest_lock:
            self.manifest.record_failure(stage, unit, error)

    # -- gates ----------------------------------------------------------------

    def _passes(self, model, text: str, counter_prefix: str) -> bool:
        if not text:
            return False
        if model is None:
            self._bump(f"{counter_prefix}_in")
            self._bump(f"{counter_prefix}_out")
            return True
        self._bump(f"{counter_prefix}_in")
        label, _ = filtering.classify(model, text)
        if label is filtering.Label.POSITIVE:
            self._bump(f"{counter_prefix}_out")
            return True
        return False

    # -- main entry points ----------------------------------------------------

    def run(self, identifications: list[str]) -> tuple[KnowledgeGraph, RunManifest]:
        (self.run_dir / IDENTIFICATIONS_FILE).write_text(
            "\n".join(identifications) + ("\n" if identifications else ""), encoding="utf-8")

        pending = [i for i in identifications if not self.manifest.is_done("organism", i)]
        if self.config.parallelism > 1 and len(pending) > 1:
            with ThreadPoolExecutor(max_workers=self.config.parallelism) as pool:
                list(pool.map(self._process_identification, pending))
        else:
            for ident in pending:
                self._process_identification(ident)

        chemicals = self._chemicals_with_relations()
        pending_chemicals = [c for c in chemicals
                             if not self.manifest.is_done("chemical", c.natural_key)]
        if self.config.parallelism > 1 and len(pending_chemicals) > 1:
            with ThreadPoolExecutor(max_workers=self.config.parallelism) as pool:
                list(pool.map(self._process_chemical, pending_chemicals))
        else:
            for chemical in pending_chemicals:
                self._process_chemical(chemical)

        with self._manifest_lock:
            self.manifest.completed = True
            self.graph.export(self.run_dir / KG_EXPORT)
            self.manifest.save(self.run_dir / MANIFEST_FILE)
        return self.graph, self.manifest

    def _chemicals_with_relations(self):
        nodes = []
        for node in self.graph.nodes(NodeKind.CHEMICAL):
            if self.graph.in_neighbors(node.id, EdgeLabel.RELATION_OBJECT_CHEMICAL):
                nodes.append(node)
        return nodes

    # -- organism phase: steps 1 to 6 -----------------------------------------

    def _process_identification(self, raw_ident: str) -> None:
        try:
            ident = taxonomy.parse_identification(
                raw_ident, genus_abbreviations=self.config.genus_abbreviations)
        except taxonomy.TaxonomyError as exc:
            self._fail("parse", raw_ident, exc)
            self._checkpoint("organism", raw_ident)
            return
        matches = taxonomy.resolve(ident, self.index)
        if not matches:
            self._fail("resolve", raw_ident,
                       PipelineError(f"NoTaxonMatch for {ident.query_name!r}"))
            self._bump("organisms_unmatched")
            self._checkpoint("organism", raw_ident)
            return
        for match in matches:  # homonyms each get their own anchor
            try:
                expansion = taxonomy.expand_synonyms(
                    match, self.index, ident.rank, identification=ident,
                    max_genus_members=self.config.genus_expansion_cap)
            except taxonomy.TaxonomyError as exc:
                self._fail("expand", raw_ident, exc)
                continue
            self._run_organism_steps(raw_ident, expansion)
        self._bump("organisms_processed")
        self._checkpoint("organism", raw_ident)

    def _upsert_expansion(self, expansion: taxonomy.TaxonExpansion) -> tuple[str, dict]:
        """Create organism nodes for the expansion; returns the anchor node id
        and a normalised-name -> node-id map."""
        records = {r.taxon_id: r for r in expansion.matched}
        name_to_node: dict[str, str] = {}
        id_map: dict[str, str] = {}
        for record in sorted(records.values(), key=lambda r: r.taxon_id):
            node_id = self.graph.add_organism(
                record.taxon_id, record.canonical_name, record.status.value)
            id_map[record.taxon_id] = node_id
            name_to_node.setdefault(taxonomy.normalize_name(record.canonical_name), node_id)
        anchor_record = expansion.matched[0]
        # Species anchors root at the accepted taxon so alerts group there.
        if expansion.input.rank is taxonomy.IdentificationRank.SPECIES_LEVEL:
            root = taxonomy.accepted_root(anchor_record, self.index)
            anchor_id = id_map.get(root.taxon_id) or self.graph.add_organism(
                root.taxon_id, root.canonical_name, root.status.value)
            for record in records.values():
                if record.taxon_id == root.taxon_id:
                    continue
                self.graph.add_synonym_edge(id_map[record.taxon_id], anchor_id)
        else:
            anchor_id = id_map[anchor_record.taxon_id]
            for record in records.values():
                if record.taxon_id == anchor_record.taxon_id:
                    continue
                if record.status is taxonomy.TaxonStatus.SYNONYM and record.accepted_id in id_map:
                    self.graph.add_synonym_edge(id_map[record.taxon_id],
                                                id_map[record.accepted_id])
                    self.graph.add_parent_edge(id_map[record.taxon_id], anchor_id)
                else:
                    self.graph.add_parent_edge(id_map[record.taxon_id], anchor_id)
        return anchor_id, name_to_node

    def _run_organism_steps(self, raw_ident: str, expansion: taxonomy.TaxonExpansion) -> None:
        anchor_id, name_to_node = self._upsert_expansion(expansion)
        anchor_name = self.graph.node(anchor_id).attr("name")

        documents = self._retrieve(sorted(expansion.names), self.config.organism_fulltext,
                                   "org", raw_ident)

        for doc in documents:
            self._extract_ol_evidence(doc, anchor_id, str(anchor_name), raw_ident)

        if self.config.ablation is not AblationMode.LOTUS_ONLY:
            for doc in documents:
                self._extract_relations_from_document(doc, expansion, name_to_node,
                                                      anchor_id, raw_ident)
        if self.config.ablation is not AblationMode.RE_ONLY:
            self._merge_lotus_relations(expansion, name_to_node, raw_ident)

    def _retrieve(self, names: list[str], fulltext: bool, prefix: str,
                  unit: str) -> list[Document]:
        try:
            pmids = self.client.search(SearchQuery(names=frozenset(names)))
        except LiteratureError as exc:
            self._fail(f"{prefix}-search", unit, exc)
            return []
        self._bump(f"{prefix}_search_pmids", len(pmids))
        if not pmids:
            return []
        try:
            result = self.client.fetch(pmids, include_fulltext=fulltext)
        except LiteratureError as exc:
            self._fail(f"{prefix}-fetch", unit, exc)
            return []
        self._bump(f"{prefix}_docs_fetched", len(result.documents))
        if result.missing:
            self._bump(f"{prefix}_docs_missing", len(result.missing))
        return sorted(result.documents, key=lambda d: d.ref.pmid or 0)

    def _extract_ol_evidence(self, doc: Document, anchor_id: str, subject: str,
                             unit: str) -> None:
        text = doc.classification_text()
        if not self._passes(self.activity_model, text, "org_activity_filter"):
            return
        try:
            result = extraction.extract_activity_evidence(
                text, subject, self.evidence_backend, suite=self.suite, log=self.log)
        except (backends_mod.BackendUnavailable, backends_mod.OutputUnparseable) as exc:
            self._fail("ol-evidence", f"{unit}/{doc.ref}", exc)
            return
        if result.rationale is None:
            return
        level, warnings = extraction.classify_alert_level(
            result.rationale, self.evidence_backend, suite=self.suite, log=self.log)
        literature_id = self.graph.add_literature(doc.ref, year=doc.pub_year, title=doc.title)
        text_id = self.graph.add_text(text, "abstract", literature_id)
        self.graph.add_evidence(
            anchor_id, EvidenceKind.OL, level, result.rationale, literature_id,
            text_id=text_id,
            extra={"backend": result.backend_identity,
                   "prompt_digest": result.prompt_digest,
                   **({"parse_warnings": warnings} if warnings else {})})
        self._bump(f"ol_evidence_{level.value.lower()}")

    def _extract_relations_from_document(self, doc: Document,
                                         expansion: taxonomy.TaxonExpansion,
                                         name_to_node: dict, anchor_id: str,
                                         unit: str) -> None:
        text = doc.classification_text()
        if not self._passes(self.npr_model, text, "npr_filter"):
            return
        passages: list[tuple[str, str, RelationSource]] = []
        if text:
            passages.append(("abstract", text, RelationSource.TIAB_NPR))
        if doc.paragraphs:
            body = "\n\n".join(doc.paragraphs)
            for i, chunk in enumerate(chunk_fulltext(
                    body, self.config.max_chunk_tokens, self.config.chunk_overlap)):
                passages.append((f"chunk-{i}", chunk.text, RelationSource.CHUNK_NPR))
            self._bump("paragraph_chunks", len(passages) - 1)
        for passage_id, passage, source in passages:
            try:
                candidates = extraction.extract_relations(
                    passage, sorted(expansion.names), self.re_backend, doc.ref,
                    source=source, passage_id=passage_id, suite=self.suite, log=self.log)
            except (backends_mod.BackendUnavailable, backends_mod.OutputUnparseable) as exc:
                self._fail("relation-extraction", f"{unit}/{doc.ref}/{passage_id}", exc)
                continue
            for candidate in candidates:
                organism_id = name_to_node.get(
                    taxonomy.normalize_name(candidate.organism_mention), anchor_id)
                chemical_id = self.graph.add_chemical(candidate.chemical.display,
                                                      candidate.chemical.key)
                literature_id = self.graph.add_literature(doc.ref, year=doc.pub_year,
                                                          title=doc.title)
                origin = "abstract" if source is RelationSource.TIAB_NPR else "paragraph"
                text_id = self.graph.add_text(passage, origin, literature_id)
                extra = {"backend": candidate.backend_identity,
                         "prompt_digest": candidate.prompt_digest,
                         "organism_mention": candidate.organism_mention}
                if candidate.off_target:
                    extra["off_target"] = True
                self.graph.add_relation(organism_id, chemical_id, source,
                                        literature_id, text_id=text_id, extra=extra)
                self._bump(f"relations_{source.value.lower()}")

    def _merge_lotus_relations(self, expansion: taxonomy.TaxonExpansion,
                               name_to_node: dict, unit: str) -> None:
        if not (self.config.lotus_dump or self.config.lotus_endpoint):
            return
        try:
            relations = lotus.fetch_relations(
                set(expansion.names), dump_path=self.config.lotus_dump,
                endpoint_url=self.config.lotus_endpoint)
        except lotus.LotusError as exc:
            self._fail("lotus", unit, exc)
            return
        for relation in relations:
            organism_id = name_to_node.get(taxonomy.normalize_name(relation.organism_name))
            if organism_id is None:
                continue
            chemical_id = self.graph.add_chemical(relation.chemical_display,
                                                  relation.chemical_key)
            literature_id = self.graph.add_literature(relation.reference,
                                                      year=relation.reference_year)
            extra = {}
            if relation.structure_id:
                extra["structure_id"] = relation.structure_id
            self.graph.add_relation(organism_id, chemical_id, RelationSource.LOTUS_NPR,
                                    literature_id, extra=extra)
            self._bump("relations_lotusnpr")

    # -- chemical phase: steps 7 to 9 ------------------------------------------

    def _process_chemical(self, chemical_node) -> None:
        key = chemical_node.natural_key
        display = str(chemical_node.attr("name"))
        if key in self.stoplist:
            self._bump("chemicals_stoplisted")
            self._checkpoint("chemical", key)
            return
        names = extraction.chemical_query_names(display)
        documents = self._retrieve(names, self.config.chemical_fulltext, "chem", key)
        for doc in documents:
            self._extract_cl_evidence(doc, chemical_node.id, display, key)
        self._bump("chemicals_processed")
        self._checkpoint("chemical", key)

    def _extract_cl_evidence(self, doc: Document, chemical_id: str, subject: str,
                             unit: str) -> None:
        text = doc.classification_text()
        if not self._passes(self.activity_model, text, "chem_activity_filter"):
            return
        try:
            result = extraction.extract_activity_evidence(
                text, subject, self.evidence_backend, suite=self.suite, log=self.log)
        except (backends_mod.BackendUnavailable, backends_mod.OutputUnparseable) as exc:
            self._fail("cl-evidence", f"{unit}/{doc.ref}", exc)
            return
        if result.rationale is None:
            return
        level, warnings = extraction.classify_alert_level(
            result.rationale, self.evidence_backend, suite=self.suite, log=self.log)
        literature_id = self.graph.add_literature(doc.ref, year=doc.pub_year, title=doc.title)
        text_id = self.graph.add_text(text, "abstract", literature_id)
        self.graph.add_evidence(
            chemical_id, EvidenceKind.CL, level, result.rationale, literature_id,
            text_id=text_id,
            extra={"backend": result.backend_identity,
                   "prompt_digest": result.prompt_digest,
                   **({"parse_warnings": warnings} if warnings else {})})
        self._bump(f"cl_evidence_{level.value.lower()}")


def run(identifications: list[str], config: PipelineConfig, run_dir: str | Path,
        run_id: Optional[str] = None, transport: Optional[Callable] = None,
        ) -> tuple[KnowledgeGraph, RunManifest]:
    runner = PipelineRunner(config, run_dir, run_id=run_id, transport=transport)
    return runner.run(identifications)


def resume(run_dir: str | Path, config: Optional[PipelineConfig] = None,
           transport: Optional[Callable] = None) -> tuple[KnowledgeGraph, RunManifest]:
    """Continue an interrupted run; completed (step, unit) pairs are skipped."""
    run_dir = Path(run_dir)
    snapshot_path = run_dir / CONFIG_SNAPSHOT
    if not snapshot_path.exists():
        raise MissingCheckpoint(f"no config snapshot in {run_dir}")
    if config is None:
        config = PipelineConfig.from_dict(json.loads(snapshot_path.read_text(encoding="utf-8")))
    idents_path = run_dir / IDENTIFICATIONS_FILE
    if not idents_path.exists():
        raise MissingCheckpoint(f"no identifications file in {run_dir}")
    identifications = [l for l in idents_path.read_text(encoding="utf-8").splitlines() if l]
    runner = PipelineRunner(config, run_dir, resuming=True, transport=transport)
    return runner.run(identifications)
