import json
import re

import pytest
from fastapi.testclient import TestClient

from npalert import pipeline
from npalert.api import create_app, directory_run_status
from npalert.kg import KnowledgeGraph

import scenario as scn

ORGANISMS = [spec.ident for spec in scn.evaluation_scenario()]
TOKEN = "review-token"


@pytest.fixture(scope="module")
def eval_graph(tmp_path_factory):
    root = tmp_path_factory.mktemp("apirun")
    env = scn.build(scn.evaluation_scenario(), root / "fixtures")
    config = env.make_config()
    graph, _ = pipeline.run(ORGANISMS, config, root / "run",
                            transport=env.responder().transport)
    return graph, root / "run"


@pytest.fixture()
def client(eval_graph):
    graph, run_dir = eval_graph
    app = create_app(graph, shared_token=TOKEN,
                     run_status=directory_run_status(run_dir.parent))
    return TestClient(app)


def open_session(client, reviewer="alice"):
    response = client.post("/api/session", json={"reviewer": reviewer, "token": TOKEN})
    assert response.status_code == 200
    return response.json()["session"]


class TestOrganismList:
    def test_twelve_rows_sorted_by_strong(self, client):
        body = client.get("/api/organisms").json()
        assert body["total"] == 12
        strongs = [item["strong_total"] for item in body["items"]]
        assert strongs == sorted(strongs, reverse=True)
        assert strongs[0] == max(strongs)
        assert body["format_version"].startswith("npalert-kg/")

    def test_pagination_stable_without_duplicates(self, client):
        seen = []
        for offset in (0, 5, 10):
            page = client.get(f"/api/organisms?limit=5&offset={offset}").json()
            seen.extend(item["id"] for item in page["items"])
        assert len(seen) == 12
        assert len(set(seen)) == 12

    def test_empty_graph(self):
        app = create_app(KnowledgeGraph(), shared_token=TOKEN)
        body = TestClient(app).get("/api/organisms").json()
        assert body["items"] == []
        assert body["total"] == 0

    def test_read_purity(self, client):
        first = client.get("/api/organisms").text
        second = client.get("/api/organisms").text
        assert first == second


def strictum_detail(client):
    listing = client.get("/api/organisms?limit=50").json()["items"]
    [entry] = [e for e in listing if e["name"] == "Sarocladium strictum"]
    return client.get(f"/api/organisms/{entry['id']}").json()


class TestOrganismDetail:
    def test_synonym_list_of_four_names(self, client):
        detail = strictum_detail(client)
        names = {detail["name"]} | {s["name"] for s in detail["synonyms"]}
        assert names == {
            "Sarocladium strictum", "Cephalosporium acremonium",
            "Hyalopus acremonium", "Acremonium strictum",
        }

    def test_strong_cl_item_with_activity_link(self, client):
        detail = strictum_detail(client)
        [ceph] = [c for c in detail["chemicals"] if c["name"] == "Cephalosporin C"]
        strong = [e for e in ceph["cl_evidence"] if e["level"] == "Strong"]
        assert strong
        assert strong[0]["literature"]["pmid"] == 14126054
        assert strong[0]["literature"]["url"] == "https://pubmed.ncbi.nlm.nih.gov/14126054/"
        assert {"LotusNPR", "TiabNPR", "ChunkNPR"} == set(ceph["sources"])
        assert any(step["label"] == "hasSynonymTaxon"
                   for path in strong[0]["paths"] for step in path)

    def test_ol_evidence_present(self, client):
        detail = strictum_detail(client)
        assert [e["level"] for e in detail["ol_evidence"]] == ["Medium"]
        assert detail["ol_evidence"][0]["rationale"]

    def test_genus_expansion_groups_members(self):
        graph = KnowledgeGraph()
        genus = graph.add_organism("g1", "Fictella", "Accepted")
        first = graph.add_organism("s1", "Fictella prima", "Accepted")
        second = graph.add_organism("s3", "Fictella secunda", "Accepted")
        synonym = graph.add_organism("s2", "Vetustella prima", "Synonym")
        graph.add_parent_edge(first, genus)
        graph.add_parent_edge(second, genus)
        graph.add_parent_edge(synonym, genus)
        graph.add_synonym_edge(synonym, first)
        client = TestClient(create_app(graph, shared_token=TOKEN))
        detail = client.get(f"/api/organisms/{genus}").json()
        members = {m["name"]: m for m in detail["members"]}
        assert "Fictella prima" in members
        assert members["Fictella prima"]["synonyms"] == ["Vetustella prima"]

    def test_bad_id(self, client):
        response = client.get("/api/organisms/does-not-exist")
        assert response.status_code == 404
        assert response.json()["detail"]["error"] == "NotFound"

    def test_literature_links_well_formed(self, client):
        pubmed = re.compile(r"https://pubmed\.ncbi\.nlm\.nih\.gov/\d+/")
        doi = re.compile(r"https://doi\.org/.+")
        listing = client.get("/api/organisms?limit=50").json()["items"]
        urls = []
        for entry in listing:
            detail = client.get(f"/api/organisms/{entry['id']}").json()
            for item in detail["ol_evidence"]:
                urls.append(item["literature"]["url"])
            for chemical in detail["chemicals"]:
                for item in chemical["cl_evidence"]:
                    urls.append(item["literature"]["url"])
        assert urls
        for url in urls:
            assert pubmed.fullmatch(url) or doi.fullmatch(url), url


class TestTriage:
    def test_mutation_requires_session(self, client):
        detail = strictum_detail(client)
        target = detail["ol_evidence"][0]["id"]
        response = client.post("/api/triage", json={"target": target,
                                                    "status": "Dismissed"})
        assert response.status_code == 401

    def test_dismiss_round_trip(self, client):
        session = open_session(client)
        detail = strictum_detail(client)
        target = detail["ol_evidence"][0]["id"]
        response = client.post("/api/triage",
                               json={"target": target, "status": "Dismissed"},
                               headers={"X-Session": session})
        assert response.status_code == 200
        assert response.json()["status"] == "Dismissed"
        assert response.json()["reviewer"] == "alice"
        after = strictum_detail(client)
        assert after["ol_evidence"][0]["triage"] == "Dismissed"

    def test_bad_token_rejected(self, client):
        response = client.post("/api/session",
                               json={"reviewer": "eve", "token": "wrong"})
        assert response.status_code == 401

    def test_unknown_status(self, client):
        session = open_session(client)
        response = client.post("/api/triage",
                               json={"target": "x", "status": "Shredded"},
                               headers={"X-Session": session})
        assert response.status_code == 400

    def test_unknown_target(self, client):
        session = open_session(client)
        response = client.post("/api/triage",
                               json={"target": "missing", "status": "Dismissed"},
                               headers={"X-Session": session})
        assert response.status_code == 404


class TestRunStatus:
    def test_manifest_snapshot(self, client, eval_graph):
        _, run_dir = eval_graph
        manifest = json.loads((run_dir / "manifest.json").read_text())
        response = client.get(f"/api/runs/{manifest['run_id']}")
        assert response.status_code == 200
        assert response.json()["run"]["counters"]["organisms_processed"] == 12

    def test_counters_increase_between_polls(self, tmp_path):
        graph = KnowledgeGraph()
        run_dir = tmp_path / "runs" / "live"
        run_dir.mkdir(parents=True)
        manifest = pipeline.RunManifest(run_id="live", config_digest="d")
        manifest.bump("org_docs_fetched", 3)
        manifest.save(run_dir / "manifest.json")
        client = TestClient(create_app(graph, shared_token=TOKEN,
                                       run_status=directory_run_status(tmp_path / "runs")))
        first = client.get("/api/runs/live").json()["run"]["counters"]
        manifest.bump("org_docs_fetched", 4)
        manifest.save(run_dir / "manifest.json")
        second = client.get("/api/runs/live").json()["run"]["counters"]
        assert second["org_docs_fetched"] > first["org_docs_fetched"]

    def test_unknown_run(self, client):
        assert client.get("/api/runs/never-happened").status_code == 404
