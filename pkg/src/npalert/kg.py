"""The typed knowledge graph unifying taxonomy, relations, evidence and triage.

Node kinds mirror the alert ontology: Organism and Chemical entities,
RelationNode for each organism-chemical isolation link (tagged with its
source), EvidenceNode for each activity rationale (OL or CL, with an alert
level), TextNode for extracted passages and LiteratureNode for references.
Nodes are keyed by natural identity so re-running a pipeline upserts rather
than inflates; ids are digests of those keys, which makes exports stable.

Storage is an embedded single-file store: in-memory adjacency indexes plus
a versioned line-delimited export with stable ordering, so released graph
subsets diff cleanly.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional

from .extraction import AlertLevel, EvidenceKind, LEVEL_RANK, RelationSource
from .literature import DocumentRef
from .taxonomy import normalize_name

logger = logging.getLogger(__name__)

FORMAT_VERSION = "npalert-kg/1"


class KgError(Exception):
    pass


class NodeNotFound(KgError):
    pass


class IllegalEndpointKinds(KgError):
    pass


class MissingRequiredAttribute(KgError):
    pass


class IllegalTargetKind(KgError):
    pass


class FormatVersionMismatch(KgError):
    pass


class GraphImportError(KgError):
    def __init__(self, line_no: int, message: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


class NodeKind(str, Enum):
    ORGANISM = "Organism"
    CHEMICAL = "Chemical"
    RELATION = "RelationNode"
    EVIDENCE = "EvidenceNode"
    TEXT = "TextNode"
    LITERATURE = "LiteratureNode"


_KIND_ORDER = {kind: i for i, kind in enumerate(NodeKind)}


class EdgeLabel(str, Enum):
    HAS_SYNONYM_TAXON = "hasSynonymTaxon"
    HAS_PARENT_TAXON = "hasParentTaxon"
    RELATION_SUBJECT_ORGANISM = "relationSubjectOrganism"
    RELATION_OBJECT_CHEMICAL = "relationObjectChemical"
    EVIDENCE_SUBJECT = "evidenceSubject"
    EXTRACTED_FROM_TEXT = "extractedFromText"
    REPORTED_IN_LITERATURE = "reportedInLiterature"
    TEXT_OF_LITERATURE = "textOfLiterature"


_LEGAL_ENDPOINTS: dict[EdgeLabel, set[tuple[NodeKind, NodeKind]]] = {
    EdgeLabel.HAS_SYNONYM_TAXON: {(NodeKind.ORGANISM, NodeKind.ORGANISM)},
    EdgeLabel.HAS_PARENT_TAXON: {(NodeKind.ORGANISM, NodeKind.ORGANISM)},
    EdgeLabel.RELATION_SUBJECT_ORGANISM: {(NodeKind.RELATION, NodeKind.ORGANISM)},
    EdgeLabel.RELATION_OBJECT_CHEMICAL: {(NodeKind.RELATION, NodeKind.CHEMICAL)},
    EdgeLabel.EVIDENCE_SUBJECT: {
        (NodeKind.EVIDENCE, NodeKind.ORGANISM),
        (NodeKind.EVIDENCE, NodeKind.CHEMICAL),
    },
    EdgeLabel.EXTRACTED_FROM_TEXT: {
        (NodeKind.RELATION, NodeKind.TEXT),
        (NodeKind.EVIDENCE, NodeKind.TEXT),
    },
    EdgeLabel.REPORTED_IN_LITERATURE: {
        (NodeKind.RELATION, NodeKind.LITERATURE),
        (NodeKind.EVIDENCE, NodeKind.LITERATURE),
    },
    EdgeLabel.TEXT_OF_LITERATURE: {(NodeKind.TEXT, NodeKind.LITERATURE)},
}

_REQUIRED_ATTRS: dict[NodeKind, tuple[str, ...]] = {
    NodeKind.ORGANISM: ("taxon_id", "name", "status"),
    NodeKind.CHEMICAL: ("name", "key"),
    NodeKind.RELATION: ("source", "organism_id", "chemical_id", "literature_id"),
    NodeKind.EVIDENCE: ("kind", "level", "subject_id", "literature_id", "rationale"),
    NodeKind.TEXT: ("text", "origin", "literature_id"),
    NodeKind.LITERATURE: ("ref",),
}


class TriageStatus(str, Enum):
    UNREVIEWED = "Unreviewed"
    CONFIRMED = "Confirmed"
    DISMISSED = "Dismissed"
    ORGANISM_DISCARDED = "OrganismDiscarded"


@dataclass(frozen=True)
class TriageState:
    target: str
    status: TriageStatus
    reviewer: str
    timestamp: str


@dataclass(frozen=True)
class KgNode:
    id: str
    kind: NodeKind
    natural_key: str
    attrs: dict

    def attr(self, name: str):
        return self.attrs.get(name)


@dataclass(frozen=True)
class KgEdge:
    from_id: str
    to_id: str
    label: EdgeLabel


@dataclass(frozen=True, order=True)
class PathStep:
    label: str
    node_id: str


@dataclass
class AlertHit:
    evidence: KgNode
    paths: list[tuple[PathStep, ...]]


def _digest_id(kind: NodeKind, natural_key: str) -> str:
    return hashlib.sha1(f"{kind.value}\x1f{natural_key}".encode("utf-8")).hexdigest()[:16]


def rationale_digest(rationale: str) -> str:
    return hashlib.sha1(rationale.encode("utf-8")).hexdigest()[:12]


def natural_key_for(kind: NodeKind, attrs: dict) -> str:
    """Compute a node's identity from its attributes."""
    missing = [a for a in _REQUIRED_ATTRS[kind] if attrs.get(a) in (None, "")
               and not (kind is NodeKind.EVIDENCE and a == "rationale")]
    if missing:
        raise MissingRequiredAttribute(f"{kind.value} node lacks attributes {missing}")
    if kind is NodeKind.ORGANISM:
        return str(attrs["taxon_id"])
    if kind is NodeKind.CHEMICAL:
        return str(attrs["key"])
    if kind is NodeKind.LITERATURE:
        return str(attrs["ref"])
    if kind is NodeKind.RELATION:
        return "\x1f".join((attrs["organism_id"], attrs["chemical_id"],
                            str(attrs["source"]), attrs["literature_id"]))
    if kind is NodeKind.EVIDENCE:
        return "\x1f".join((attrs["subject_id"], attrs["literature_id"],
                            rationale_digest(attrs.get("rationale") or "")))
    if kind is NodeKind.TEXT:
        return "\x1f".join((attrs["literature_id"], str(attrs["origin"]),
                            rationale_digest(attrs["text"])))
    raise KgError(f"unhandled kind {kind}")


_ENUM_ATTRS = {
    (NodeKind.RELATION, "source"): RelationSource,
    (NodeKind.EVIDENCE, "kind"): EvidenceKind,
    (NodeKind.EVIDENCE, "level"): AlertLevel,
}


class KnowledgeGraph:
    """In-memory typed graph with a single-writer mutation lock."""

    def __init__(self) -> None:
        self._nodes: dict[str, KgNode] = {}
        self._edges: set[KgEdge] = set()
        self._out: dict[str, dict[EdgeLabel, list[str]]] = {}
        self._in: dict[str, dict[EdgeLabel, list[str]]] = {}
        self._triage: dict[str, list[TriageState]] = {}
        self.write_lock = threading.RLock()

    # -- mutation ---------------------------------------------------------

    def upsert_node(self, kind: NodeKind, attrs: dict) -> str:
        """Insert or update a node; identity comes from its natural key."""
        attrs = dict(attrs)
        for (node_kind, name), enum_type in _ENUM_ATTRS.items():
            if kind is node_kind and name in attrs:
                attrs[name] = enum_type(attrs[name]).value
        key = natural_key_for(kind, attrs)
        node_id = _digest_id(kind, key)
        with self.write_lock:
            existing = self._nodes.get(node_id)
            if existing is not None:
                merged = dict(existing.attrs)
                merged.update(attrs)
                self._nodes[node_id] = KgNode(node_id, kind, key, merged)
            else:
                self._nodes[node_id] = KgNode(node_id, kind, key, attrs)
        return node_id

    def upsert_edge(self, from_id: str, to_id: str, label: EdgeLabel | str) -> None:
        label = EdgeLabel(label)
        source = self._nodes.get(from_id)
        target = self._nodes.get(to_id)
        if source is None or target is None:
            raise NodeNotFound(f"edge {label.value} references a missing node")
        if (source.kind, target.kind) not in _LEGAL_ENDPOINTS[label]:
            raise IllegalEndpointKinds(
                f"{label.value} cannot connect {source.kind.value} to {target.kind.value}"
            )
        edge = KgEdge(from_id, to_id, label)
        with self.write_lock:
            if edge in self._edges:
                return
            self._edges.add(edge)
            self._out.setdefault(from_id, {}).setdefault(label, []).append(to_id)
            self._in.setdefault(to_id, {}).setdefault(label, []).append(from_id)

    def set_triage(self, target: str, status: TriageStatus | str, reviewer: str,
                   timestamp: Optional[str] = None) -> TriageState:
        status = TriageStatus(status)
        node = self.node(target)
        if node.kind not in (NodeKind.ORGANISM, NodeKind.EVIDENCE):
            raise IllegalTargetKind(f"cannot triage a {node.kind.value}")
        state = TriageState(
            target=target,
            status=status,
            reviewer=reviewer,
            timestamp=timestamp or datetime.now(timezone.utc).isoformat(timespec="seconds"),
        )
        with self.write_lock:
            self._triage.setdefault(target, []).append(state)
        return state

    # -- lookups ----------------------------------------------------------

    def node(self, node_id: str) -> KgNode:
        try:
            return self._nodes[node_id]
        except KeyError:
            raise NodeNotFound(f"no node {node_id!r}") from None

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._nodes

    def nodes(self, kind: Optional[NodeKind] = None) -> list[KgNode]:
        out = [n for n in self._nodes.values() if kind is None or n.kind is kind]
        out.sort(key=lambda n: (_KIND_ORDER[n.kind], n.natural_key))
        return out

    def edges(self) -> list[KgEdge]:
        return sorted(self._edges, key=lambda e: (e.label.value, self._sort_key(e.from_id),
                                                  self._sort_key(e.to_id)))

    def _sort_key(self, node_id: str) -> tuple:
        node = self._nodes[node_id]
        return (_KIND_ORDER[node.kind], node.natural_key)

    def out_neighbors(self, node_id: str, label: EdgeLabel) -> list[str]:
        return sorted(self._out.get(node_id, {}).get(label, []), key=self._sort_key)

    def in_neighbors(self, node_id: str, label: EdgeLabel) -> list[str]:
        return sorted(self._in.get(node_id, {}).get(label, []), key=self._sort_key)

    def triage_history(self, target: str) -> list[TriageState]:
        return list(self._triage.get(target, []))

    def current_triage(self, target: str) -> TriageStatus:
        history = self._triage.get(target)
        return history[-1].status if history else TriageStatus.UNREVIEWED

    def find_organism(self, name: str) -> list[KgNode]:
        wanted = normalize_name(name)
        return [n for n in self.nodes(NodeKind.ORGANISM)
                if normalize_name(str(n.attr("name"))) == wanted]

    def find_chemical(self, key: str) -> Optional[KgNode]:
        node_id = _digest_id(NodeKind.CHEMICAL, key)
        return self._nodes.get(node_id)

    def find_literature(self, ref: DocumentRef) -> Optional[KgNode]:
        return self._nodes.get(_digest_id(NodeKind.LITERATURE, ref.key()))

    def counts_by_kind(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for node in self._nodes.values():
            counts[node.kind.value] = counts.get(node.kind.value, 0) + 1
        return counts

    # -- ontology builders --------------------------------------------------

    def add_organism(self, taxon_id: str, name: str, status: str,
                     extra: Optional[dict] = None) -> str:
        attrs = {"taxon_id": taxon_id, "name": name, "status": status}
        attrs.update(extra or {})
        return self.upsert_node(NodeKind.ORGANISM, attrs)

    def add_synonym_edge(self, synonym_id: str, accepted_id: str) -> None:
        # Stored synonym -> accepted; queried symmetrically.
        self.upsert_edge(synonym_id, accepted_id, EdgeLabel.HAS_SYNONYM_TAXON)

    def add_parent_edge(self, child_id: str, parent_id: str) -> None:
        self.upsert_edge(child_id, parent_id, EdgeLabel.HAS_PARENT_TAXON)

    def add_chemical(self, name: str, key: str, extra: Optional[dict] = None) -> str:
        attrs = {"name": name, "key": key}
        attrs.update(extra or {})
        return self.upsert_node(NodeKind.CHEMICAL, attrs)

    def add_literature(self, ref: DocumentRef, year: Optional[int] = None,
                       title: Optional[str] = None) -> str:
        attrs: dict = {"ref": ref.key()}
        if ref.pmid is not None:
            attrs["pmid"] = ref.pmid
        if ref.doi:
            attrs["doi"] = ref.doi
        if year is not None:
            attrs["year"] = year
        if title:
            attrs["title"] = title
        return self.upsert_node(NodeKind.LITERATURE, attrs)

    def add_text(self, text: str, origin: str, literature_id: str) -> str:
        text_id = self.upsert_node(NodeKind.TEXT, {
            "text": text, "origin": origin, "literature_id": literature_id,
        })
        self.upsert_edge(text_id, literature_id, EdgeLabel.TEXT_OF_LITERATURE)
        return text_id

    def add_relation(self, organism_id: str, chemical_id: str, source: RelationSource | str,
                     literature_id: str, text_id: Optional[str] = None,
                     extra: Optional[dict] = None) -> str:
        source = RelationSource(source)
        if source is RelationSource.LOTUS_NPR and text_id is not None:
            raise KgError("LotusNPR relations carry no extracted text")
        if source is not RelationSource.LOTUS_NPR and text_id is None:
            raise KgError(f"{source.value} relations require their source text")
        attrs = {"source": source.value, "organism_id": organism_id,
                 "chemical_id": chemical_id, "literature_id": literature_id}
        attrs.update(extra or {})
        relation_id = self.upsert_node(NodeKind.RELATION, attrs)
        self.upsert_edge(relation_id, organism_id, EdgeLabel.RELATION_SUBJECT_ORGANISM)
        self.upsert_edge(relation_id, chemical_id, EdgeLabel.RELATION_OBJECT_CHEMICAL)
        self.upsert_edge(relation_id, literature_id, EdgeLabel.REPORTED_IN_LITERATURE)
        if text_id is not None:
            self.upsert_edge(relation_id, text_id, EdgeLabel.EXTRACTED_FROM_TEXT)
        return relation_id

    def add_evidence(self, subject_id: str, kind: EvidenceKind | str, level: AlertLevel | str,
                     rationale: str, literature_id: str, text_id: Optional[str] = None,
                     extra: Optional[dict] = None) -> str:
        kind = EvidenceKind(kind)
        subject = self.node(subject_id)
        expected = NodeKind.ORGANISM if kind is EvidenceKind.OL else NodeKind.CHEMICAL
        if subject.kind is not expected:
            raise IllegalEndpointKinds(
                f"{kind.value} evidence must attach to a {expected.value}, got {subject.kind.value}"
            )
        attrs = {"kind": kind.value, "level": AlertLevel(level).value,
                 "subject_id": subject_id, "literature_id": literature_id,
                 "rationale": rationale}
        attrs.update(extra or {})
        evidence_id = self.upsert_node(NodeKind.EVIDENCE, attrs)
        self.upsert_edge(evidence_id, subject_id, EdgeLabel.EVIDENCE_SUBJECT)
        self.upsert_edge(evidence_id, literature_id, EdgeLabel.REPORTED_IN_LITERATURE)
        if text_id is not None:
            self.upsert_edge(evidence_id, text_id, EdgeLabel.EXTRACTED_FROM_TEXT)
        return evidence_id

    # -- alert queries ------------------------------------------------------

    def organism_closure(self, anchor_id: str) -> dict[str, tuple[PathStep, ...]]:
        """The anchor, every taxon reachable through synonym links (followed
        symmetrically), and, for genus anchors, member species with their
        synonyms. Values are explanation paths from the anchor."""
        anchor = self.node(anchor_id)
        if anchor.kind is not NodeKind.ORGANISM:
            raise NodeNotFound(f"{anchor_id} is not an Organism node")

        closure: dict[str, tuple[PathStep, ...]] = {}

        def synonym_walk(start: str, base: tuple[PathStep, ...]) -> None:
            queue = [(start, base)]
            while queue:
                current, path = queue.pop(0)
                if current in closure:
                    continue
                closure[current] = path
                label = EdgeLabel.HAS_SYNONYM_TAXON
                for neighbor in self.out_neighbors(current, label) + self.in_neighbors(current, label):
                    if neighbor not in closure:
                        queue.append((neighbor, path + (PathStep(label.value, neighbor),)))

        synonym_walk(anchor_id, ())
        for member in self.in_neighbors(anchor_id, EdgeLabel.HAS_PARENT_TAXON):
            synonym_walk(member, (PathStep(EdgeLabel.HAS_PARENT_TAXON.value, member),))
        return closure

    def alerts_for_organism(self, anchor_id: str) -> list[AlertHit]:
        """OL evidence on the organism's closure plus CL evidence reachable
        through its relation nodes (the 2-hop search), with explanation paths."""
        closure = self.organism_closure(anchor_id)
        hits: dict[str, AlertHit] = {}

        def record(evidence_id: str, path: tuple[PathStep, ...]) -> None:
            hit = hits.get(evidence_id)
            if hit is None:
                hits[evidence_id] = AlertHit(evidence=self.node(evidence_id), paths=[path])
            elif path not in hit.paths:
                hit.paths.append(path)

        for member_id, base in sorted(closure.items(), key=lambda kv: self._sort_key(kv[0])):
            for evidence_id in self.in_neighbors(member_id, EdgeLabel.EVIDENCE_SUBJECT):
                record(evidence_id, base + (PathStep(EdgeLabel.EVIDENCE_SUBJECT.value, evidence_id),))
            for relation_id in self.in_neighbors(member_id, EdgeLabel.RELATION_SUBJECT_ORGANISM):
                relation_path = base + (PathStep(EdgeLabel.RELATION_SUBJECT_ORGANISM.value, relation_id),)
                for chemical_id in self.out_neighbors(relation_id, EdgeLabel.RELATION_OBJECT_CHEMICAL):
                    chemical_path = relation_path + (PathStep(EdgeLabel.RELATION_OBJECT_CHEMICAL.value, chemical_id),)
                    for evidence_id in self.in_neighbors(chemical_id, EdgeLabel.EVIDENCE_SUBJECT):
                        record(evidence_id,
                               chemical_path + (PathStep(EdgeLabel.EVIDENCE_SUBJECT.value, evidence_id),))

        ordered = sorted(hits.values(), key=lambda h: (
            -LEVEL_RANK[AlertLevel(h.evidence.attr("level"))],
            h.evidence.attr("kind"),
            h.evidence.natural_key,
        ))
        for hit in ordered:
            hit.paths.sort()
        return ordered

    def alert_summary(self, anchor_id: str) -> dict[str, dict[str, int]]:
        """Counts per evidence kind and alert level for one organism."""
        summary = {kind.value: {level.value: 0 for level in AlertLevel}
                   for kind in EvidenceKind}
        for hit in self.alerts_for_organism(anchor_id):
            summary[str(hit.evidence.attr("kind"))][str(hit.evidence.attr("level"))] += 1
        return summary

    # -- persistence --------------------------------------------------------

    def export(self, destination: str | Path) -> None:
        """Write the versioned line-delimited export with stable ordering."""
        with open(destination, "w", encoding="utf-8") as handle:
            handle.write(json.dumps({"type": "header", "format": FORMAT_VERSION},
                                    sort_keys=True) + "\n")
            for node in self.nodes():
                handle.write(json.dumps({
                    "type": "node", "kind": node.kind.value, "id": node.id,
                    "key": node.natural_key, "attrs": node.attrs,
                }, sort_keys=True, ensure_ascii=False) + "\n")
            for edge in self.edges():
                handle.write(json.dumps({
                    "type": "edge", "label": edge.label.value,
                    "from": edge.from_id, "to": edge.to_id,
                }, sort_keys=True) + "\n")
            for target in sorted(self._triage, key=self._sort_key):
                for state in self._triage[target]:
                    handle.write(json.dumps({
                        "type": "triage", "target": state.target,
                        "status": state.status.value, "reviewer": state.reviewer,
                        "timestamp": state.timestamp,
                    }, sort_keys=True, ensure_ascii=False) + "\n")

    @classmethod
    def import_(cls, source: str | Path) -> "KnowledgeGraph":
        graph = cls()
        with open(source, encoding="utf-8") as handle:
            first = handle.readline().strip()
            if not first:
                raise FormatVersionMismatch("empty file, expected a header line")
            try:
                header = json.loads(first)
            except json.JSONDecodeError as exc:
                raise FormatVersionMismatch(f"unreadable header: {exc}") from exc
            if header.get("type") != "header" or header.get("format") != FORMAT_VERSION:
                raise FormatVersionMismatch(
                    f"expected format {FORMAT_VERSION}, got {header.get('format')!r}"
                )
            for line_no, line in enumerate(handle, start=2):
                line = line.strip()
                if not line:
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise GraphImportError(line_no, f"unreadable record: {exc}") from exc
                kind = record.get("type")
                try:
                    if kind == "node":
                        node = KgNode(record["id"], NodeKind(record["kind"]),
                                      record["key"], record["attrs"])
                        graph._nodes[node.id] = node
                    elif kind == "edge":
                        graph.upsert_edge(record["from"], record["to"], record["label"])
                    elif kind == "triage":
                        target = record["target"]
                        if target not in graph._nodes:
                            raise NodeNotFound(f"triage target {target!r} missing")
                        graph._triage.setdefault(target, []).append(TriageState(
                            target=target, status=TriageStatus(record["status"]),
                            reviewer=record["reviewer"], timestamp=record["timestamp"],
                        ))
                    else:
                        raise KgError(f"unknown record type {kind!r}")
                except (KgError, KeyError, ValueError) as exc:
                    raise GraphImportError(line_no, str(exc)) from exc
        return graph

    def check_integrity(self) -> list[str]:
        """Structural invariants; returns a list of violation descriptions."""
        problems = []
        for node in self.nodes(NodeKind.RELATION):
            if len(self.out_neighbors(node.id, EdgeLabel.RELATION_SUBJECT_ORGANISM)) != 1:
                problems.append(f"relation {node.id} needs exactly one subject organism")
            if len(self.out_neighbors(node.id, EdgeLabel.RELATION_OBJECT_CHEMICAL)) != 1:
                problems.append(f"relation {node.id} needs exactly one object chemical")
            has_text = bool(self.out_neighbors(node.id, EdgeLabel.EXTRACTED_FROM_TEXT))
            if node.attr("source") == RelationSource.LOTUS_NPR.value and has_text:
                problems.append(f"LotusNPR relation {node.id} has an extractedFromText edge")
            if node.attr("source") != RelationSource.LOTUS_NPR.value and not has_text:
                problems.append(f"{node.attr('source')} relation {node.id} lacks its source text")
        for node in self.nodes(NodeKind.EVIDENCE):
            if len(self.out_neighbors(node.id, EdgeLabel.EVIDENCE_SUBJECT)) != 1:
                problems.append(f"evidence {node.id} needs exactly one subject")
            if not self.out_neighbors(node.id, EdgeLabel.REPORTED_IN_LITERATURE):
                problems.append(f"evidence {node.id} lacks a literature edge")
        return problems
