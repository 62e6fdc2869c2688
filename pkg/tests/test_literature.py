import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from npalert.literature import (
    Chunk,
    Document,
    DocumentRef,
    EUtilsClient,
    MalformedResponse,
    PreconditionError,
    RateLimiter,
    ResponseCache,
    SearchQuery,
    SearchScope,
    TransportError,
    chunk_fulltext,
    join_chunks,
)

from mock_eutils import EUtilsResponder, PubmedRecord, VirtualClock


SEARCH_MAP = {
    "sarocladium strictum": [10397815, 575040],
    "cephalosporium acremonium": [10397815, 8982351],
}

RECORDS = {
    10397815: PubmedRecord(
        pmid=10397815,
        title="Cephalosporin biosynthesis in Cephalosporium acremonium.",
        abstract="Cephalosporin C was isolated from Cephalosporium acremonium cultures.",
        year=1999,
        mesh=["D002511"],
        paragraphs=["Fermentation broths were extracted.", "Cephalosporin C accumulated."],
        doi="10.1000/demo.10397815",
    ),
    575040: PubmedRecord(
        pmid=575040,
        title="Isopenicillin N from Cephalosporium.",
        abstract="Isopenicillin N production was measured.",
        year=1979,
    ),
    8982351: PubmedRecord(
        pmid=8982351,
        title="Orbuticin, a new compound from Acremonium butyri.",
        abstract=None,  # title-only record, full text unavailable
        year=1996,
    ),
}


@pytest.fixture
def responder():
    return EUtilsResponder(SEARCH_MAP, RECORDS)


def make_client(responder, **kwargs):
    clock = VirtualClock()
    kwargs.setdefault("transport", responder.transport)
    kwargs.setdefault("clock", clock.clock)
    kwargs.setdefault("sleep", clock.sleep)
    return EUtilsClient(base_url="http://mock/entrez/eutils", **kwargs)


class TestDocumentRef:
    def test_requires_identifier(self):
        with pytest.raises(ValueError):
            DocumentRef()

    def test_pmid_positive(self):
        with pytest.raises(ValueError):
            DocumentRef(pmid=-5)

    def test_urls(self):
        assert DocumentRef(pmid=575040).url() == "https://pubmed.ncbi.nlm.nih.gov/575040/"
        assert DocumentRef(doi="10.1/x").url() == "https://doi.org/10.1/x"


class TestSearchQuery:
    def test_term_is_quoted_disjunction(self):
        query = SearchQuery.of("Sarocladium strictum", "Acremonium strictum")
        assert query.term() == (
            '"Acremonium strictum"[Title/Abstract] OR "Sarocladium strictum"[Title/Abstract]'
        )

    def test_all_fields_scope(self):
        query = SearchQuery.of("x", scope=SearchScope.ALL_FIELDS)
        assert query.term() == '"x"[All Fields]'

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            SearchQuery(names=frozenset())


class TestSearch:
    def test_fixture_pmids_sorted_ascending(self, responder):
        client = make_client(responder)
        assert client.search(SearchQuery.of("Sarocladium strictum")) == [575040, 10397815]

    def test_no_match(self, responder):
        client = make_client(responder)
        assert client.search(SearchQuery.of("Nullius nomen")) == []

    def test_union_without_duplicates(self, responder):
        client = make_client(responder)
        pmids = client.search(SearchQuery.of("Sarocladium strictum", "Cephalosporium acremonium"))
        assert pmids == [575040, 8982351, 10397815]

    def test_pagination(self, responder):
        client = make_client(responder, page_size=1)
        pmids = client.search(SearchQuery.of("Sarocladium strictum"))
        assert pmids == [575040, 10397815]
        searches = [r for r in responder.requests if r[0] == "esearch"]
        assert len(searches) == 2

    def test_malformed_response(self, responder):
        client = make_client(responder, transport=lambda url, params: b"this is not xml")
        with pytest.raises(MalformedResponse):
            client.search(SearchQuery.of("x"))


class TestFetch:
    def test_title_only_record_has_absent_abstract(self, responder):
        client = make_client(responder)
        result = client.fetch([8982351])
        [doc] = result.documents
        assert doc.abstract is None
        assert doc.title.startswith("Orbuticin")

    def test_empty_pmids_rejected(self, responder):
        client = make_client(responder)
        with pytest.raises(PreconditionError):
            client.fetch([])

    def test_batching(self):
        records = {i: PubmedRecord(pmid=i, title=f"t{i}") for i in range(1, 251)}
        responder = EUtilsResponder({}, records)
        client = make_client(responder, fetch_batch_size=200)
        result = client.fetch(list(range(1, 251)))
        assert len(result.documents) == 250
        fetches = [r for r in responder.requests if r[0] == "efetch"]
        assert len(fetches) == 2

    def test_missing_pmids_collected(self, responder):
        client = make_client(responder)
        result = client.fetch([575040, 999999999])
        assert [d.ref.pmid for d in result.documents] == [575040]
        assert result.missing == [999999999]

    def test_metadata_parsed(self, responder):
        client = make_client(responder)
        [doc] = client.fetch([10397815]).documents
        assert doc.pub_year == 1999
        assert doc.language == "eng"
        assert doc.mesh_terms == ["D002511"]
        assert doc.ref.doi == "10.1000/demo.10397815"
        assert doc.paragraphs == []

    def test_fulltext_paragraphs(self, responder):
        client = make_client(responder)
        [doc] = client.fetch([10397815], include_fulltext=True).documents
        assert doc.paragraphs == [
            "Fermentation broths were extracted.",
            "Cephalosporin C accumulated.",
        ]

    def test_search_fetch_containment(self, responder):
        client = make_client(responder)
        pmids = client.search(SearchQuery.of("Cephalosporium acremonium"))
        result = client.fetch(pmids)
        assert {d.ref.pmid for d in result.documents} <= set(pmids)


class TestRetries:
    def test_recovers_after_transient_failures(self, responder):
        failures = {"left": 2}

        def flaky(url, params):
            if failures["left"] > 0:
                failures["left"] -= 1
                raise TransportError("boom")
            return responder.transport(url, params)

        client = make_client(responder, transport=flaky)
        assert client.search(SearchQuery.of("Sarocladium strictum")) == [575040, 10397815]

    def test_gives_up_after_bounded_retries(self, responder):
        calls = {"n": 0}

        def always_down(url, params):
            calls["n"] += 1
            raise TransportError("down")

        client = make_client(responder, transport=always_down, max_retries=3)
        with pytest.raises(TransportError):
            client.search(SearchQuery.of("x"))
        assert calls["n"] == 4


class TestCache:
    def test_cache_hit_bypasses_network(self, responder, tmp_path):
        cache = ResponseCache(tmp_path / "cache")
        client = make_client(responder, cache=cache)
        client.fetch([575040])
        before = responder.request_count
        client.fetch([575040])
        assert responder.request_count == before

    def test_corrupt_entry_refetched_and_rewritten(self, responder, tmp_path):
        cache = ResponseCache(tmp_path / "cache")
        client = make_client(responder, cache=cache)
        client.fetch([575040])
        [entry] = list((tmp_path / "cache").glob("*.bin"))
        entry.write_bytes(b"garbage")
        before = responder.request_count
        result = client.fetch([575040])
        assert result.documents[0].ref.pmid == 575040
        assert responder.request_count == before + 1
        meta = json.loads(entry.with_name(entry.name.replace(".bin", ".meta.json")).read_text())
        assert "retrieved_at" in meta

    def test_disabled_cache_always_hits_network(self, responder, tmp_path):
        cache = ResponseCache(tmp_path / "cache", enabled=False)
        client = make_client(responder, cache=cache)
        client.fetch([575040])
        client.fetch([575040])
        fetches = [r for r in responder.requests if r[0] == "efetch"]
        assert len(fetches) == 2


def sliding_window_max(times, window=1.0):
    times = sorted(times)
    best = 0
    for i, start in enumerate(times):
        count = sum(1 for t in times[i:] if t < start + window)
        best = max(best, count)
    return best


class TestRateLimiter:
    def test_never_exceeds_rate_in_any_window(self):
        clock = VirtualClock()
        limiter = RateLimiter(5, clock=clock.clock, sleep=clock.sleep)
        stamps = []
        for _ in range(200):
            limiter.acquire()
            stamps.append(clock.now)
        assert sliding_window_max(stamps) <= 5

    def test_burst_then_wait(self):
        clock = VirtualClock()
        limiter = RateLimiter(3, clock=clock.clock, sleep=clock.sleep)
        for _ in range(3):
            limiter.acquire()
        assert clock.now == 0.0
        limiter.acquire()
        assert clock.now >= 1.0

    def test_client_requests_are_limited(self, responder):
        clock = VirtualClock()
        client = EUtilsClient(
            base_url="http://mock", rate_limit=2, transport=responder.transport,
            clock=clock.clock, sleep=clock.sleep, page_size=1,
        )
        client.search(SearchQuery.of("Sarocladium strictum"))  # 2 pages = 2 requests
        client.search(SearchQuery.of("Cephalosporium acremonium"))
        assert clock.now >= 1.0


class TestChunking:
    def test_two_short_paragraphs_unchanged(self):
        body = "Alpha beta gamma.\n\nDelta epsilon."
        chunks = chunk_fulltext(body, max_chunk=400, overlap=50)
        assert [c.text for c in chunks] == ["Alpha beta gamma.", "Delta epsilon."]
        assert join_chunks(chunks) == body

    def test_long_paragraph_windowed(self):
        body = " ".join(f"tok{i}" for i in range(1000))
        chunks = chunk_fulltext(body, max_chunk=400, overlap=50)
        assert len(chunks) == 3
        for first, second in zip(chunks, chunks[1:]):
            assert first.text.split()[-50:] == second.text.split()[:50]
        assert join_chunks(chunks) == body

    def test_empty_body(self):
        assert chunk_fulltext("", 100, 10) == []

    def test_invalid_parameters(self):
        with pytest.raises(ValueError):
            chunk_fulltext("x", 10, 10)
        with pytest.raises(ValueError):
            chunk_fulltext("x", 10, -1)

    @given(
        st.text(alphabet="ab \n\t.", min_size=0, max_size=400),
        st.integers(2, 40),
        st.integers(0, 10),
    )
    @settings(max_examples=300)
    def test_round_trip_property(self, body, max_chunk, overlap):
        overlap = min(overlap, max_chunk - 1)
        chunks = chunk_fulltext(body, max_chunk, overlap)
        assert join_chunks(chunks) == body
