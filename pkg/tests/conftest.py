"""Shared fixtures: backbone files, canned EUtils responses, stub scripts."""

from __future__ import annotations

import json
import re
from pathlib import Path

import pytest

BACKBONE_HEADER = (
    "taxonID\tcanonicalName\tscientificName\ttaxonRank\ttaxonomicStatus"
    "\tacceptedNameUsageID\tparentNameUsageID"
)

# The classic reclassification chain: one accepted name and three synonyms
# published under earlier classifications.
STRICTUM_ROWS = [
    ("t1", "Sarocladium strictum", "Sarocladium strictum (W. Gams) Summerb.",
     "species", "accepted", "", ""),
    ("t2", "Cephalosporium acremonium", "Cephalosporium acremonium Corda",
     "species", "synonym", "t1", ""),
    ("t3", "Hyalopus acremonium", "Hyalopus acremonium",
     "species", "synonym", "t1", ""),
    ("t4", "Acremonium strictum", "Acremonium strictum W. Gams",
     "species", "synonym", "t1", ""),
]

GENUS_ROWS = [
    ("g1", "Fictella", "Fictella", "genus", "accepted", "", ""),
    ("s1", "Fictella prima", "Fictella prima", "species", "accepted", "", "g1"),
    ("s2", "Vetustella prima", "Vetustella prima", "species", "synonym", "s1", "g1"),
    ("s3", "Fictella secunda", "Fictella secunda", "species", "accepted", "", "g1"),
    ("s4", "Vetustella secunda", "Vetustella secunda", "species", "synonym", "s3", "g1"),
]


def write_backbone(path: Path, rows) -> Path:
    lines = [BACKBONE_HEADER] + ["\t".join(row) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def strictum_backbone(tmp_path) -> Path:
    return write_backbone(tmp_path / "backbone.tsv", STRICTUM_ROWS)


@pytest.fixture
def full_backbone(tmp_path) -> Path:
    return write_backbone(tmp_path / "backbone_full.tsv", STRICTUM_ROWS + GENUS_ROWS)


def write_stub_script(path: Path, rules, default=None) -> Path:
    script = {"rules": rules}
    if default is not None:
        script["default"] = default
    path.write_text(json.dumps(script, indent=2), encoding="utf-8")
    return path


# Three canonical worked cases for the two-stage evidence flow: a quantitative
# comparison (strong), a hedged "weak activity" statement (medium), and a text
# with nothing to report (no rationale extracted at all).
EVIDENCE_CASE_STRONG = {
    "pmid": 4078571,
    "subject": "Cephalosporin C",
    "text": (
        "Cephalosporin C was compared with benzylpenicillin and methicillin "
        "against Gram-positive organisms including Staphylococcus aureus, and "
        "tested in protection experiments in infected mice."
    ),
    "stage1": (
        "The text provides evidence that Cephalosporin C has antibacterial "
        "activity, particularly against Staphylococcus aureus. It is stated "
        "that Cephalosporin C has roughly the same activity as benzylpenicillin "
        "against several Gram-positive organisms and about one-eighth of the "
        "activity of benzylpenicillin against penicillin-sensitive strains of "
        "Staphylococcus aureus. Additionally, Cephalosporin C shows 4 to 8 "
        "times the activity of methicillin against penicillinase-producing "
        "staphylococcal strains."
    ),
    "level": "Strong",
}

EVIDENCE_CASE_MEDIUM = {
    "pmid": 22136576,
    "subject": "Acremostrictin",
    "text": (
        "Acremostrictin, a new lactone, was isolated. The new compound "
        "exhibited weak antibacterial activities."
    ),
    "stage1": (
        "The evidence of the potential antibiotic activity of Acremostrictin "
        "is found in the statement \"The new compound exhibited weak "
        "antibacterial activities.\" This suggests that Acremostrictin showed "
        "some level of antibacterial effect, although it was classified as weak."
    ),
    "level": "Medium",
}

EVIDENCE_CASE_WEAK = {
    "pmid": 6684424,
    "subject": "Dipeptide delta-(L-alpha-aminoadipyl)-L-cysteine",
    "text": (
        "The tripeptide delta-(L-alpha-aminoadipyl)-L-cysteinyl-D-valine and "
        "the dipeptide delta-(L-alpha-aminoadipyl)-L-cysteine were synthesised "
        "using a cell-free extract of Cephalosporium acremonium."
    ),
    "stage1": (
        "The text describes the biosynthesis of two compounds using a "
        "cell-free extract of Cephalosporium acremonium. However, it does not "
        "provide any information about the potential antibiotic activity of "
        "the dipeptide. Therefore, there is No evidence found in this text to "
        "support the potential antibiotic activity of this chemical compound."
    ),
    "level": None,  # stage one reports no evidence; no alert is produced
}

EVIDENCE_CASES = (EVIDENCE_CASE_STRONG, EVIDENCE_CASE_MEDIUM, EVIDENCE_CASE_WEAK)


def evidence_stub_rules():
    """Stub rules scripting the two stages for the three worked cases."""
    rules = []
    for case in EVIDENCE_CASES:
        rules.append({"pattern": re.escape(case["text"][:40]), "response": case["stage1"]})
        if case["level"] is not None:
            rules.append({"pattern": re.escape(case["stage1"][:40]),
                          "response": case["level"]})
    return rules


@pytest.fixture
def stub_script(tmp_path):
    def make(rules, default=None, name="stub.json"):
        return write_stub_script(tmp_path / name, rules, default)
    return make


def build_strictum_graph():
    """The canonical small graph: an accepted organism with one synonym, one
    chemical linked by relations from all three sources, one Medium OL
    evidence on the organism and one Strong CL evidence on the chemical.

    Returns (graph, ids) where ids names every node for assertions.
    """
    from npalert.extraction import AlertLevel, EvidenceKind, RelationSource
    from npalert.kg import KnowledgeGraph
    from npalert.literature import DocumentRef

    graph = KnowledgeGraph()
    ids = {}
    ids["accepted"] = graph.add_organism("t1", "Sarocladium strictum", "Accepted")
    ids["synonym"] = graph.add_organism("t2", "Cephalosporium acremonium", "Synonym")
    graph.add_synonym_edge(ids["synonym"], ids["accepted"])
    ids["chemical"] = graph.add_chemical("Cephalosporin C", "cephalosporin c")
    ids["lit_isolation"] = graph.add_literature(DocumentRef(pmid=10397815), year=1999)
    ids["lit_activity"] = graph.add_literature(DocumentRef(pmid=14126054), year=1963)
    ids["lit_ol"] = graph.add_literature(DocumentRef(pmid=575040), year=1979)
    ids["text_abstract"] = graph.add_text(
        "Cephalosporin C was isolated from Cephalosporium acremonium.",
        "abstract", ids["lit_isolation"])
    ids["text_paragraph"] = graph.add_text(
        "Purification of Cephalosporin C from Cephalosporium acremonium broth.",
        "paragraph", ids["lit_isolation"])
    ids["r_lotus"] = graph.add_relation(
        ids["synonym"], ids["chemical"], RelationSource.LOTUS_NPR, ids["lit_activity"])
    ids["r_tiab"] = graph.add_relation(
        ids["synonym"], ids["chemical"], RelationSource.TIAB_NPR,
        ids["lit_isolation"], text_id=ids["text_abstract"])
    ids["r_chunk"] = graph.add_relation(
        ids["synonym"], ids["chemical"], RelationSource.CHUNK_NPR,
        ids["lit_isolation"], text_id=ids["text_paragraph"])
    ids["e_ol"] = graph.add_evidence(
        ids["accepted"], EvidenceKind.OL, AlertLevel.MEDIUM,
        "The culture inhibited growth of test strains.", ids["lit_ol"])
    ids["e_cl"] = graph.add_evidence(
        ids["chemical"], EvidenceKind.CL, AlertLevel.STRONG,
        "Cephalosporin C has roughly the same activity as benzylpenicillin.",
        ids["lit_activity"])
    return graph, ids
