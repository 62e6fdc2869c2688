"""HTTP service for reviewers: organism triage lists, evidence detail, run status.

Read endpoints are pure over the graph snapshot; triage mutations serialise
through the graph's writer lock and require a session obtained by presenting
the shared reviewer token. Every response carries the graph format version
so clients can detect drift.
"""

from __future__ import annotations

import json
import logging
import secrets
import time
from pathlib import Path
from typing import Callable, Optional

from fastapi import FastAPI, Header, HTTPException, Query
from pydantic import BaseModel

from .extraction import AlertLevel
from .kg import (
    EdgeLabel,
    FORMAT_VERSION,
    IllegalTargetKind,
    KnowledgeGraph,
    KgNode,
    NodeKind,
    NodeNotFound,
    TriageStatus,
)
from .literature import DocumentRef

logger = logging.getLogger(__name__)

SESSION_HEADER = "X-Session"


class SessionRequest(BaseModel):
    reviewer: str
    token: str


class TriageRequest(BaseModel):
    target: str
    status: str


class SessionStore:
    def __init__(self, shared_token: str, ttl_seconds: float = 8 * 3600.0):
        self._shared_token = shared_token
        self._ttl = ttl_seconds
        self._sessions: dict[str, tuple[str, float]] = {}

    def open(self, reviewer: str, token: str) -> str:
        if token != self._shared_token:
            raise HTTPException(status_code=401,
                                detail={"error": "Unauthorized", "message": "bad token"})
        session_id = secrets.token_hex(16)
        self._sessions[session_id] = (reviewer, time.time() + self._ttl)
        return session_id

    def reviewer_for(self, session_id: Optional[str]) -> str:
        entry = self._sessions.get(session_id or "")
        if entry is None or entry[1] < time.time():
            raise HTTPException(status_code=401,
                                detail={"error": "Unauthorized",
                                        "message": "missing or expired session"})
        return entry[0]


def directory_run_status(root: str | Path) -> Callable[[str], Optional[dict]]:
    """Find a run manifest under ``root`` by run id or directory name."""
    root = Path(root)

    def lookup(run_id: str) -> Optional[dict]:
        candidates = [root / run_id / "manifest.json"] + sorted(root.glob("*/manifest.json"))
        for path in candidates:
            if not path.exists():
                continue
            try:
                manifest = json.loads(path.read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError):
                continue
            if manifest.get("run_id") == run_id or path.parent.name == run_id:
                return manifest
        return None

    return lookup


def _literature_payload(graph: KnowledgeGraph, literature_id: str) -> dict:
    node = graph.node(literature_id)
    pmid = node.attr("pmid")
    doi = node.attr("doi")
    ref = DocumentRef(pmid=pmid, doi=doi)
    return {"pmid": pmid, "doi": doi, "url": ref.url(), "year": node.attr("year")}


def _path_payload(graph: KnowledgeGraph, path) -> list[dict]:
    steps = []
    for step in path:
        node = graph.node(step.node_id)
        display = node.attr("name") or node.attr("source") or node.kind.value
        steps.append({"label": step.label, "node_id": step.node_id, "display": display})
    return steps


def _evidence_payload(graph: KnowledgeGraph, hit) -> dict:
    evidence = hit.evidence
    return {
        "id": evidence.id,
        "kind": evidence.attr("kind"),
        "level": evidence.attr("level"),
        "rationale": evidence.attr("rationale"),
        "literature": _literature_payload(graph, str(evidence.attr("literature_id"))),
        "paths": [_path_payload(graph, p) for p in hit.paths],
        "triage": graph.current_triage(evidence.id).value,
    }


def _strong_total(summary: dict) -> int:
    return summary["CL"]["Strong"] + summary["OL"]["Strong"]


def _anchor_nodes(graph: KnowledgeGraph) -> list[KgNode]:
    """Organisms that are not a synonym or member of another organism."""
    anchors = []
    for node in graph.nodes(NodeKind.ORGANISM):
        if graph.out_neighbors(node.id, EdgeLabel.HAS_SYNONYM_TAXON):
            continue
        if graph.out_neighbors(node.id, EdgeLabel.HAS_PARENT_TAXON):
            continue
        anchors.append(node)
    return anchors


def create_app(
    graph: KnowledgeGraph,
    shared_token: str = "review",
    run_status: Optional[Callable[[str], Optional[dict]]] = None,
) -> FastAPI:
    app = FastAPI(title="npalert reviewer API")
    sessions = SessionStore(shared_token)

    def envelope(payload: dict) -> dict:
        payload["format_version"] = FORMAT_VERSION
        return payload

    @app.post("/api/session")
    def open_session(request: SessionRequest):
        session_id = sessions.open(request.reviewer, request.token)
        return envelope({"session": session_id, "reviewer": request.reviewer})

    @app.get("/api/organisms")
    def list_organisms(limit: int = Query(50, ge=1, le=500), offset: int = Query(0, ge=0)):
        entries = []
        for node in _anchor_nodes(graph):
            summary = graph.alert_summary(node.id)
            entries.append({
                "id": node.id,
                "name": node.attr("name"),
                "taxon_id": node.attr("taxon_id"),
                "synonym_count": len(graph.organism_closure(node.id)) - 1,
                "alert_summary": summary,
                "strong_total": _strong_total(summary),
                "triage": graph.current_triage(node.id).value,
            })
        entries.sort(key=lambda e: (-e["strong_total"], str(e["name"])))
        page = entries[offset:offset + limit]
        return envelope({"items": page, "total": len(entries),
                         "limit": limit, "offset": offset})

    @app.get("/api/organisms/{node_id}")
    def organism_detail(node_id: str):
        try:
            node = graph.node(node_id)
        except NodeNotFound:
            raise HTTPException(status_code=404,
                                detail={"error": "NotFound",
                                        "message": f"no organism {node_id!r}"})
        if node.kind is not NodeKind.ORGANISM:
            raise HTTPException(status_code=404,
                                detail={"error": "NotFound",
                                        "message": f"{node_id!r} is not an organism"})

        synonyms = []
        members = []
        closure = graph.organism_closure(node.id)
        for member_id in sorted(closure, key=lambda i: graph.node(i).natural_key):
            if member_id == node.id:
                continue
            member = graph.node(member_id)
            entry = {"id": member.id, "name": member.attr("name"),
                     "taxon_id": member.attr("taxon_id"), "status": member.attr("status")}
            if any(step.label == EdgeLabel.HAS_PARENT_TAXON.value
                   for step in closure[member_id]):
                member_synonyms = [
                    graph.node(s).attr("name")
                    for s in graph.in_neighbors(member.id, EdgeLabel.HAS_SYNONYM_TAXON)
                ]
                members.append({**entry, "synonyms": sorted(member_synonyms)})
            else:
                synonyms.append(entry)

        hits = graph.alerts_for_organism(node.id)
        ol_items = [_evidence_payload(graph, h) for h in hits
                    if h.evidence.attr("kind") == "OL"]
        cl_hits = [h for h in hits if h.evidence.attr("kind") == "CL"]
        chemicals: dict[str, dict] = {}
        for hit in cl_hits:
            chemical_id = str(hit.evidence.attr("subject_id"))
            chemical = graph.node(chemical_id)
            entry = chemicals.setdefault(chemical_id, {
                "id": chemical_id,
                "name": chemical.attr("name"),
                "sources": sorted({
                    str(graph.node(r).attr("source"))
                    for r in graph.in_neighbors(chemical_id,
                                                EdgeLabel.RELATION_OBJECT_CHEMICAL)
                }),
                "cl_evidence": [],
            })
            entry["cl_evidence"].append(_evidence_payload(graph, hit))

        return envelope({
            "id": node.id,
            "name": node.attr("name"),
            "taxon_id": node.attr("taxon_id"),
            "status": node.attr("status"),
            "triage": graph.current_triage(node.id).value,
            "synonyms": synonyms,
            "members": members,
            "alert_summary": graph.alert_summary(node.id),
            "ol_evidence": ol_items,
            "chemicals": sorted(chemicals.values(), key=lambda c: str(c["name"])),
        })

    @app.post("/api/triage")
    def post_triage(request: TriageRequest,
                    x_session: Optional[str] = Header(None, alias=SESSION_HEADER)):
        reviewer = sessions.reviewer_for(x_session)
        try:
            status = TriageStatus(request.status)
        except ValueError:
            raise HTTPException(status_code=400,
                                detail={"error": "BadStatus",
                                        "message": f"unknown status {request.status!r}"})
        try:
            state = graph.set_triage(request.target, status, reviewer)
        except NodeNotFound:
            raise HTTPException(status_code=404,
                                detail={"error": "NotFound",
                                        "message": f"no node {request.target!r}"})
        except IllegalTargetKind as exc:
            raise HTTPException(status_code=400,
                                detail={"error": "IllegalTargetKind", "message": str(exc)})
        return envelope({
            "target": state.target, "status": state.status.value,
            "reviewer": state.reviewer, "timestamp": state.timestamp,
            "history_length": len(graph.triage_history(request.target)),
        })

    @app.get("/api/runs/{run_id}")
    def get_run_status(run_id: str):
        manifest = run_status(run_id) if run_status else None
        if manifest is None:
            raise HTTPException(status_code=404,
                                detail={"error": "NotFound",
                                        "message": f"no run {run_id!r}"})
        return envelope({"run": manifest})

    return app
