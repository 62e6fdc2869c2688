"""PubMed retrieval over the NCBI EUtils protocol, with caching and rate limiting.

The client speaks ``esearch`` and ``efetch`` XML against a configurable base
URL (tests point it at a mock server), paginates past server page limits,
batches fetches, retries transport failures with backoff, and never exceeds
the configured request rate in any one-second window. Raw responses can be
cached on disk keyed by a request digest so reruns replay without network.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence
from xml.etree import ElementTree

logger = logging.getLogger(__name__)

DEFAULT_EUTILS_BASE = "https://eutils.ncbi.nlm.nih.gov/entrez/eutils"

Transport = Callable[[str, dict], bytes]


class LiteratureError(Exception):
    pass


class TransportError(LiteratureError):
    """A retryable upstream failure (network error, throttle, 5xx)."""


class MalformedResponse(LiteratureError):
    pass


class PreconditionError(LiteratureError):
    pass


@dataclass(frozen=True)
class DocumentRef:
    """A literature reference: PubMed id, DOI, or both."""

    pmid: Optional[int] = None
    doi: Optional[str] = None

    def __post_init__(self) -> None:
        if self.pmid is None and not self.doi:
            raise ValueError("a DocumentRef needs a pmid or a doi")
        if self.pmid is not None and self.pmid <= 0:
            raise ValueError(f"pmid must be positive, got {self.pmid}")

    def url(self) -> str:
        if self.pmid is not None:
            return f"https://pubmed.ncbi.nlm.nih.gov/{self.pmid}/"
        return f"https://doi.org/{self.doi}"

    def key(self) -> str:
        return f"pmid:{self.pmid}" if self.pmid is not None else f"doi:{self.doi}"

    def __str__(self) -> str:
        return self.key()


@dataclass
class Document:
    ref: DocumentRef
    title: str = ""
    abstract: Optional[str] = None
    paragraphs: list[str] = field(default_factory=list)
    pub_year: Optional[int] = None
    language: Optional[str] = None
    mesh_terms: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.pub_year is not None:
            ceiling = datetime.now().year + 1
            if not 1500 <= self.pub_year <= ceiling:
                raise ValueError(f"pub_year {self.pub_year} outside [1500, {ceiling}]")

    def classification_text(self) -> str:
        """Title plus abstract, the text the gate classifiers see."""
        return " ".join(part for part in (self.title, self.abstract) if part).strip()


class SearchScope(str, Enum):
    TITLE_ABSTRACT = "TitleAbstract"
    ALL_FIELDS = "AllFields"


_SCOPE_TAGS = {
    SearchScope.TITLE_ABSTRACT: "[Title/Abstract]",
    SearchScope.ALL_FIELDS: "[All Fields]",
}


@dataclass(frozen=True)
class SearchQuery:
    names: frozenset[str]
    scope: SearchScope = SearchScope.TITLE_ABSTRACT

    def __post_init__(self) -> None:
        if not self.names:
            raise ValueError("a SearchQuery needs at least one name")
        if any(not n.strip() for n in self.names):
            raise ValueError("query names must be non-empty")

    @classmethod
    def of(cls, *names: str, scope: SearchScope = SearchScope.TITLE_ABSTRACT) -> "SearchQuery":
        return cls(names=frozenset(names), scope=scope)

    def term(self) -> str:
        """Phrase-quoted names OR-joined, e.g. '"a b"[Title/Abstract] OR ...'."""
        tag = _SCOPE_TAGS[self.scope]
        return " OR ".join(f'"{name}"{tag}' for name in sorted(self.names))


class RateLimiter:
    """Sliding-window limiter: at most ``rate`` acquisitions per window.

    The clock and sleep functions are injectable so the no-burst guarantee is
    testable against a virtual clock.
    """

    def __init__(
        self,
        rate: float,
        window: float = 1.0,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if rate < 1:
            raise ValueError("rate must be at least 1 request per window")
        self._max = int(rate)
        self._window = window
        self._clock = clock
        self._sleep = sleep
        self._stamps: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                while self._stamps and now - self._stamps[0] >= self._window:
                    self._stamps.popleft()
                if len(self._stamps) < self._max:
                    self._stamps.append(now)
                    return
                wait = self._stamps[0] + self._window - now
            self._sleep(max(wait, 0.0) + 1e-9)


class ResponseCache:
    """One file per request digest plus a small metadata sidecar.

    Corrupt entries are dropped and refetched; writes go through a temp file
    rename so concurrent readers never see partial content.
    """

    def __init__(self, directory: str | Path, enabled: bool = True):
        self.directory = Path(directory)
        self.enabled = enabled
        if enabled:
            self.directory.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def request_key(endpoint: str, params: dict) -> str:
        payload = json.dumps({"endpoint": endpoint, "params": params}, sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def _paths(self, key: str) -> tuple[Path, Path]:
        return self.directory / f"{key}.bin", self.directory / f"{key}.meta.json"

    def get(self, key: str) -> Optional[bytes]:
        if not self.enabled:
            return None
        body_path, meta_path = self._paths(key)
        if not body_path.exists():
            return None
        try:
            data = body_path.read_bytes()
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
            if meta.get("sha256") != hashlib.sha256(data).hexdigest():
                raise ValueError("digest mismatch")
        except (OSError, ValueError, json.JSONDecodeError):
            logger.warning("cache entry %s corrupt; refetching", key)
            for path in (body_path, meta_path):
                path.unlink(missing_ok=True)
            return None
        return data

    def put(self, key: str, data: bytes, meta: Optional[dict] = None) -> None:
        if not self.enabled:
            return
        body_path, meta_path = self._paths(key)
        record = dict(meta or {})
        record["sha256"] = hashlib.sha256(data).hexdigest()
        record["retrieved_at"] = datetime.now().isoformat(timespec="seconds")
        tmp = body_path.with_suffix(".bin.tmp")
        tmp.write_bytes(data)
        tmp.replace(body_path)
        tmp_meta = meta_path.with_suffix(".json.tmp")
        tmp_meta.write_text(json.dumps(record, sort_keys=True), encoding="utf-8")
        tmp_meta.replace(meta_path)


def _requests_transport(url: str, params: dict) -> bytes:
    import requests

    try:
        response = requests.get(url, params=params, timeout=60)
    except requests.RequestException as exc:
        raise TransportError(str(exc)) from exc
    if response.status_code == 429 or response.status_code >= 500:
        raise TransportError(f"server returned {response.status_code}")
    if response.status_code != 200:
        raise MalformedResponse(f"server returned {response.status_code}")
    return response.content


@dataclass
class FetchResult:
    documents: list[Document]
    missing: list[int] = field(default_factory=list)


class EUtilsClient:
    """Thin, deterministic client for the esearch/efetch endpoints."""

    def __init__(
        self,
        base_url: str = DEFAULT_EUTILS_BASE,
        api_key: Optional[str] = None,
        email: Optional[str] = None,
        tool: str = "npalert",
        rate_limit: float = 3.0,
        max_retries: int = 3,
        backoff_base: float = 0.5,
        page_size: int = 200,
        fetch_batch_size: int = 200,
        transport: Optional[Transport] = None,
        cache: Optional[ResponseCache] = None,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.email = email
        self.tool = tool
        self.page_size = page_size
        self.fetch_batch_size = fetch_batch_size
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self._limiter = RateLimiter(rate_limit, clock=clock, sleep=sleep)
        self._sleep = sleep
        self._transport = transport or _requests_transport
        self.cache = cache

    def _request(self, endpoint: str, params: dict) -> bytes:
        key = ResponseCache.request_key(endpoint, params)
        if self.cache is not None:
            hit = self.cache.get(key)
            if hit is not None:
                return hit
        url = f"{self.base_url}/{endpoint}.fcgi"
        sent = dict(params)
        if self.api_key:
            sent["api_key"] = self.api_key
        if self.email:
            sent["email"] = self.email
        sent["tool"] = self.tool
        last_error: Optional[Exception] = None
        for attempt in range(self.max_retries + 1):
            self._limiter.acquire()
            try:
                data = self._transport(url, sent)
            except TransportError as exc:
                last_error = exc
                if attempt < self.max_retries:
                    self._sleep(self.backoff_base * (2 ** attempt))
                continue
            if self.cache is not None:
                self.cache.put(key, data, {"endpoint": endpoint, "params": params})
            return data
        raise TransportError(f"{endpoint} failed after {self.max_retries + 1} attempts: {last_error}")

    def search(self, query: SearchQuery) -> list[int]:
        """Run esearch for the query, paginating; pmids deduplicated and sorted."""
        term = query.term()
        pmids: set[int] = set()
        retstart = 0
        while True:
            data = self._request("esearch", {
                "db": "pubmed",
                "term": term,
                "retstart": str(retstart),
                "retmax": str(self.page_size),
            })
            count, page = _parse_esearch(data)
            pmids.update(page)
            retstart += self.page_size
            if retstart >= count or not page:
                break
        return sorted(pmids)

    def fetch(self, pmids: Sequence[int], include_fulltext: bool = False) -> FetchResult:
        """Run efetch for the given pmids, batched; missing ids are collected,
        not fatal. Full-text paragraphs come from the pmc database when asked."""
        if not pmids:
            raise PreconditionError("fetch requires at least one pmid")
        documents: dict[int, Document] = {}
        for batch in _batches(list(pmids), self.fetch_batch_size):
            data = self._request("efetch", {
                "db": "pubmed",
                "id": ",".join(str(p) for p in batch),
                "retmode": "xml",
            })
            for doc in _parse_efetch(data):
                documents[doc.ref.pmid] = doc  # type: ignore[index]
        if include_fulltext and documents:
            present = [p for p in pmids if p in documents]
            for batch in _batches(present, self.fetch_batch_size):
                data = self._request("efetch", {
                    "db": "pmc",
                    "id": ",".join(str(p) for p in batch),
                    "retmode": "xml",
                })
                for pmid, paragraphs in _parse_fulltext(data).items():
                    if pmid in documents:
                        documents[pmid].paragraphs = paragraphs
        ordered = [documents[p] for p in pmids if p in documents]
        missing = [p for p in pmids if p not in documents]
        for pmid in missing:
            logger.warning("pmid %s not found upstream", pmid)
        return FetchResult(documents=ordered, missing=missing)


def _batches(items: list, size: int) -> Iterable[list]:
    for start in range(0, len(items), size):
        yield items[start:start + size]


def _parse_xml(data: bytes) -> ElementTree.Element:
    try:
        return ElementTree.fromstring(data)
    except ElementTree.ParseError as exc:
        raise MalformedResponse(f"unparseable XML: {exc}") from exc


def _parse_esearch(data: bytes) -> tuple[int, list[int]]:
    root = _parse_xml(data)
    count_node = root.find("Count")
    if count_node is None or count_node.text is None:
        raise MalformedResponse("esearch response has no Count")
    try:
        count = int(count_node.text)
        ids = [int(node.text) for node in root.findall("IdList/Id") if node.text]
    except ValueError as exc:
        raise MalformedResponse(f"non-numeric id in esearch response: {exc}") from exc
    return count, ids


_YEAR_RE = re.compile(r"\b(1[5-9]\d\d|2\d\d\d)\b")


def _parse_efetch(data: bytes) -> list[Document]:
    root = _parse_xml(data)
    documents = []
    for article in root.findall(".//PubmedArticle"):
        pmid_node = article.find(".//MedlineCitation/PMID")
        if pmid_node is None or pmid_node.text is None:
            raise MalformedResponse("PubmedArticle without PMID")
        title_node = article.find(".//Article/ArticleTitle")
        title = "".join(title_node.itertext()).strip() if title_node is not None else ""
        sections = article.findall(".//Article/Abstract/AbstractText")
        abstract = " ".join(
            "".join(node.itertext()).strip() for node in sections
        ).strip() or None
        year = None
        date_node = article.find(".//Article/Journal/JournalIssue/PubDate")
        if date_node is not None:
            year_node = date_node.find("Year")
            raw = year_node.text if year_node is not None else "".join(date_node.itertext())
            match = _YEAR_RE.search(raw or "")
            if match:
                year = int(match.group(0))
        language_node = article.find(".//Article/Language")
        mesh_terms = []
        for heading in article.findall(".//MeshHeadingList/MeshHeading/DescriptorName"):
            mesh_terms.append(heading.get("UI") or (heading.text or "").strip())
        doi = None
        for aid in article.findall(".//ArticleIdList/ArticleId"):
            if aid.get("IdType") == "doi" and aid.text:
                doi = aid.text.strip()
        documents.append(Document(
            ref=DocumentRef(pmid=int(pmid_node.text), doi=doi),
            title=title,
            abstract=abstract,
            pub_year=year,
            language=language_node.text if language_node is not None else None,
            mesh_terms=mesh_terms,
        ))
    return documents


def _parse_fulltext(data: bytes) -> dict[int, list[str]]:
    """Parse a pmc efetch response (JATS) into pmid -> body paragraphs."""
    root = _parse_xml(data)
    out: dict[int, list[str]] = {}
    for article in root.findall(".//article"):
        pmid = None
        for aid in article.findall(".//front//article-id"):
            if aid.get("pub-id-type") == "pmid" and aid.text:
                pmid = int(aid.text)
        if pmid is None:
            continue
        paragraphs = [
            " ".join("".join(p.itertext()).split())
            for p in article.findall(".//body//p")
        ]
        out[pmid] = [p for p in paragraphs if p]
    return out


@dataclass(frozen=True)
class Chunk:
    """A passage cut from a full text.

    ``text`` is the window content (an exact substring of the source),
    ``fresh_offset`` marks where text not already covered by the previous
    chunk begins, and ``gap`` is the whitespace skipped since the previous
    chunk, so ``join_chunks`` can reproduce the source byte for byte.
    """

    text: str
    fresh_offset: int = 0
    gap: str = ""


_PARAGRAPH_BREAK_RE = re.compile(r"\n[ \t\r]*\n")
_TOKEN_SPAN_RE = re.compile(r"\S+")


def chunk_fulltext(body: str, max_chunk: int, overlap: int = 0) -> list[Chunk]:
    """Split a text into passages of at most ``max_chunk`` whitespace tokens.

    Paragraph boundaries (blank lines) are respected first; paragraphs longer
    than ``max_chunk`` are windowed with ``overlap`` tokens of context carried
    into each following window.
    """
    if overlap < 0 or max_chunk <= overlap:
        raise ValueError("require max_chunk > overlap >= 0")
    if not body:
        return []
    spans = [(m.start(), m.end()) for m in _TOKEN_SPAN_RE.finditer(body)]
    if not spans:
        return [Chunk(text=body)]

    # Group token indices into paragraphs by blank lines between tokens.
    paragraphs: list[tuple[int, int]] = []
    start = 0
    for i in range(1, len(spans)):
        between = body[spans[i - 1][1]:spans[i][0]]
        if _PARAGRAPH_BREAK_RE.search(between):
            paragraphs.append((start, i))
            start = i
    paragraphs.append((start, len(spans)))

    chunks: list[Chunk] = []
    stride = max_chunk - overlap
    cursor = 0
    for first, last in paragraphs:
        window_start = first
        window_index = 0
        while True:
            window_end = min(window_start + max_chunk, last)
            text_start = spans[window_start][0]
            text_end = spans[window_end - 1][1]
            fresh_token = window_start if window_index == 0 else window_start + overlap
            fresh_pos = spans[fresh_token][0]
            chunks.append(Chunk(
                text=body[text_start:text_end],
                fresh_offset=fresh_pos - text_start,
                gap=body[cursor:fresh_pos],
            ))
            cursor = text_end
            if window_end == last:
                break
            window_start += stride
            window_index += 1
    if cursor < len(body):
        tail = chunks[-1]
        chunks[-1] = Chunk(text=tail.text + body[cursor:], fresh_offset=tail.fresh_offset, gap=tail.gap)
    return chunks


def join_chunks(chunks: Sequence[Chunk]) -> str:
    """Invert :func:`chunk_fulltext`: drop overlaps, restore gaps."""
    return "".join(chunk.gap + chunk.text[chunk.fresh_offset:] for chunk in chunks)
