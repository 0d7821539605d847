"""Candidate paper retrieval, eligibility filtering and pool assembly."""

from __future__ import annotations

import json
import logging
import re
import time
import xml.etree.ElementTree as ET
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Optional, Protocol, Sequence

import requests
import yaml

from .errors import PoolEmpty, RateLimited, SourceUnavailable

logger = logging.getLogger(__name__)

DEFAULT_POOL_SIZE = 200
METHODS_HEADINGS = ("methods", "materials and methods", "approach")
_CODE_URL_RE = re.compile(r"https?://(?:www\.)?(?:github\.com|gitlab\.com|bitbucket\.org)/[\w.\-]+/[\w.\-]+")


class VenueTier(str, Enum):
    Q1_JOURNAL = "Q1Journal"
    TOP_AI_CONFERENCE = "TopAIConference"
    OTHER = "Other"


class SourceKind(str, Enum):
    EUROPE_PMC = "EuropePMC"
    OPENREVIEW = "OpenReview"
    FIXTURE = "Fixture"


@dataclass
class PaperRecord:
    paper_id: str
    title: str
    abstract: str
    methods_text: str
    venue: str = ""
    venue_tier: VenueTier = VenueTier.OTHER
    has_full_text: bool = False
    code_url: Optional[str] = None
    source: SourceKind = SourceKind.FIXTURE
    methods_from_abstract: bool = False
    keywords: tuple[str, ...] = ()

    def __post_init__(self):
        self.venue_tier = VenueTier(self.venue_tier)
        self.source = SourceKind(self.source)
        self.keywords = tuple(self.keywords)

    @property
    def eligible(self) -> bool:
        return self.venue_tier is not VenueTier.OTHER and self.has_full_text and bool(self.code_url)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["venue_tier"] = self.venue_tier.value
        d["source"] = self.source.value
        d["keywords"] = list(self.keywords)
        return d

    @classmethod
    def from_dict(cls, data: Mapping) -> "PaperRecord":
        data = dict(data)
        sections = data.pop("sections", None)
        known = {f for f in cls.__dataclass_fields__}
        kwargs = {k: v for k, v in data.items() if k in known}
        if not kwargs.get("methods_text"):
            text, flagged = extract_methods(sections or {}, kwargs.get("abstract", ""))
            kwargs["methods_text"] = text
            kwargs["methods_from_abstract"] = flagged
        return cls(**kwargs)


@dataclass
class CandidatePool:
    papers: list[PaperRecord]
    query_keywords: list[str]
    target_size: int = DEFAULT_POOL_SIZE
    created_iteration: int = 1

    def __post_init__(self):
        ids = [p.paper_id for p in self.papers]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate paper_id in pool")
        if len(self.papers) > self.target_size:
            raise ValueError("pool exceeds target size")
        if not all(p.eligible for p in self.papers):
            raise ValueError("pool contains ineligible papers")
        self._index = {p.paper_id: p for p in self.papers}

    def __len__(self) -> int:
        return len(self.papers)

    def __contains__(self, paper_id: str) -> bool:
        return paper_id in self._index

    def get(self, paper_id: str) -> PaperRecord:
        return self._index[paper_id]


def extract_methods(sections: Mapping[str, str], abstract: str) -> tuple[str, bool]:
    """Pick the methods section by heading; fall back to the abstract (flagged)."""
    for heading, text in sections.items():
        if heading.strip().lower().rstrip(":") in METHODS_HEADINGS and text.strip():
            return text, False
    return abstract, True


def find_code_url(*texts: Optional[str]) -> Optional[str]:
    for text in texts:
        if text:
            m = _CODE_URL_RE.search(text)
            if m:
                return m.group(0).rstrip(".")
    return None


class VenueAllowlist:
    """Venue names grouped under ``[Q1Journal]`` / ``[TopAIConference]`` headings.

    Matching is case-insensitive on the whitespace-normalized venue name; a
    conference entry also matches venues that start with it (``"NeurIPS"``
    matches ``"NeurIPS 2024"``).
    """

    def __init__(self, journals: Iterable[str] = (), conferences: Iterable[str] = ()):
        self.journals = {self._norm(j) for j in journals}
        self.conferences = {self._norm(c) for c in conferences}

    @staticmethod
    def _norm(name: str) -> str:
        return " ".join(name.lower().split())

    @classmethod
    def parse(cls, text: str) -> "VenueAllowlist":
        journals, conferences = [], []
        current = None
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                current = VenueTier(line[1:-1].strip())
                continue
            if current is VenueTier.Q1_JOURNAL:
                journals.append(line)
            elif current is VenueTier.TOP_AI_CONFERENCE:
                conferences.append(line)
            else:
                raise ValueError(f"venue {line!r} appears before a tier heading")
        return cls(journals, conferences)

    @classmethod
    def load(cls, path: Path) -> "VenueAllowlist":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    def classify(self, venue: str) -> VenueTier:
        v = self._norm(venue or "")
        if not v:
            return VenueTier.OTHER
        if v in self.journals:
            return VenueTier.Q1_JOURNAL
        if any(v == c or v.startswith(c + " ") for c in self.conferences):
            return VenueTier.TOP_AI_CONFERENCE
        return VenueTier.OTHER


@dataclass
class SearchPage:
    records: list[PaperRecord]
    next_cursor: Optional[str]


class LiteratureSource(Protocol):
    name: str

    def search(self, keywords: Sequence[str], cursor: Optional[str] = None) -> SearchPage: ...


def _require_keywords(keywords: Sequence[str]) -> list[str]:
    kws = [k.strip() for k in keywords if k and k.strip()]
    if not kws:
        raise ValueError("search requires at least one keyword")
    return kws


class FixtureSource:
    """Reads one ``.json``/``.yaml`` file per paper from a directory.

    A record matches a query when any query keyword equals (case-insensitive)
    one of the record's ``keywords`` tags. Cursors are integer offsets.
    """

    name = "fixture"

    def __init__(self, directory: Path, page_size: int = 100):
        self.directory = Path(directory)
        self.page_size = page_size
        self._records: Optional[list[PaperRecord]] = None

    def records(self) -> list[PaperRecord]:
        if self._records is None:
            if not self.directory.is_dir():
                raise SourceUnavailable(f"fixture directory {self.directory} not found")
            out = []
            for path in sorted(self.directory.iterdir()):
                if path.suffix in (".json",):
                    data = json.loads(path.read_text(encoding="utf-8"))
                elif path.suffix in (".yaml", ".yml"):
                    data = yaml.safe_load(path.read_text(encoding="utf-8"))
                else:
                    continue
                data.setdefault("source", SourceKind.FIXTURE.value)
                out.append(PaperRecord.from_dict(data))
            self._records = out
        return self._records

    def search(self, keywords: Sequence[str], cursor: Optional[str] = None) -> SearchPage:
        wanted = {k.lower() for k in _require_keywords(keywords)}
        hits = [r for r in self.records() if wanted & {k.lower() for k in r.keywords}]
        start = int(cursor or 0)
        end = start + self.page_size
        return SearchPage(hits[start:end], str(end) if end < len(hits) else None)


def _http_get(session: requests.Session, url: str, params: dict, timeout: float) -> requests.Response:
    try:
        resp = session.get(url, params=params, timeout=timeout)
    except requests.RequestException as exc:
        raise SourceUnavailable(f"{url}: {exc}") from exc
    if resp.status_code == 429:
        raise RateLimited(f"{url} rate limited")
    if resp.status_code >= 400:
        raise SourceUnavailable(f"{url} returned HTTP {resp.status_code}")
    return resp


class EuropePMCSource:
    """Europe PMC REST search with cursor pagination.

    With ``fetch_full_text`` the JATS full text of open-access hits is pulled
    to isolate the methods section; otherwise methods fall back to the abstract.
    """

    name = "europepmc"
    SEARCH_URL = "https://www.ebi.ac.uk/europepmc/webservices/rest/search"
    FULLTEXT_URL = "https://www.ebi.ac.uk/europepmc/webservices/rest/{pmcid}/fullTextXML"

    def __init__(
        self,
        allowlist: Optional[VenueAllowlist] = None,
        page_size: int = 100,
        timeout: float = 30.0,
        fetch_full_text: bool = False,
        session: Optional[requests.Session] = None,
    ):
        self.allowlist = allowlist or VenueAllowlist()
        self.page_size = page_size
        self.timeout = timeout
        self.fetch_full_text = fetch_full_text
        self.session = session or requests.Session()

    def search(self, keywords: Sequence[str], cursor: Optional[str] = None) -> SearchPage:
        kws = _require_keywords(keywords)
        params = {
            "query": " ".join(kws),
            "format": "json",
            "resultType": "core",
            "pageSize": self.page_size,
            "cursorMark": cursor or "*",
        }
        data = _http_get(self.session, self.SEARCH_URL, params, self.timeout).json()
        records = [self.map_record(item) for item in data.get("resultList", {}).get("result", [])]
        nxt = data.get("nextCursorMark")
        if not records or nxt == (cursor or "*"):
            nxt = None
        return SearchPage(records, nxt)

    def map_record(self, item: Mapping) -> PaperRecord:
        venue = (item.get("journalInfo") or {}).get("journal", {}).get("title") or item.get("journalTitle", "")
        abstract = re.sub(r"<[^>]+>", "", item.get("abstractText") or "")
        pmcid = item.get("pmcid")
        has_full = item.get("isOpenAccess") == "Y" or item.get("inEPMC") == "Y"
        sections: dict[str, str] = {}
        if self.fetch_full_text and pmcid and has_full:
            try:
                sections = self.fetch_sections(pmcid)
            except SourceUnavailable as exc:
                logger.warning("full text for %s unavailable: %s", pmcid, exc)
        methods, flagged = extract_methods(sections, abstract)
        links = " ".join(u.get("url", "") for u in (item.get("fullTextUrlList") or {}).get("fullTextUrl", []))
        return PaperRecord(
            paper_id=f"europepmc:{item.get('source', 'MED')}:{item.get('id')}",
            title=item.get("title", ""),
            abstract=abstract,
            methods_text=methods,
            venue=venue,
            venue_tier=self.allowlist.classify(venue),
            has_full_text=has_full,
            code_url=find_code_url(abstract, methods, links),
            source=SourceKind.EUROPE_PMC,
            methods_from_abstract=flagged,
        )

    def fetch_sections(self, pmcid: str) -> dict[str, str]:
        resp = _http_get(self.session, self.FULLTEXT_URL.format(pmcid=pmcid), {}, self.timeout)
        return parse_jats_sections(resp.text)


def parse_jats_sections(xml_text: str) -> dict[str, str]:
    """Top-level ``<sec>`` titles of a JATS body mapped to their plain text."""
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        raise SourceUnavailable(f"malformed full-text XML: {exc}") from exc
    body = root.find(".//body")
    out: dict[str, str] = {}
    if body is None:
        return out
    for sec in body.findall("sec"):
        title = sec.findtext("title") or ""
        text = " ".join(t.strip() for t in sec.itertext() if t.strip())
        if title and text.startswith(title):
            text = text[len(title) :].strip()
        out.setdefault(title.strip(), text)
    return out


class OpenReviewSource:
    """OpenReview API v2 note search (``/notes/search``), offset pagination."""

    name = "openreview"
    SEARCH_URL = "https://api2.openreview.net/notes/search"

    def __init__(
        self,
        allowlist: Optional[VenueAllowlist] = None,
        page_size: int = 100,
        timeout: float = 30.0,
        session: Optional[requests.Session] = None,
    ):
        self.allowlist = allowlist or VenueAllowlist()
        self.page_size = page_size
        self.timeout = timeout
        self.session = session or requests.Session()

    def search(self, keywords: Sequence[str], cursor: Optional[str] = None) -> SearchPage:
        kws = _require_keywords(keywords)
        offset = int(cursor or 0)
        params = {"term": " ".join(kws), "type": "terms", "content": "all", "source": "all",
                  "limit": self.page_size, "offset": offset}
        data = _http_get(self.session, self.SEARCH_URL, params, self.timeout).json()
        notes = data.get("notes", [])
        records = [self.map_record(n) for n in notes]
        nxt = str(offset + len(notes)) if len(notes) == self.page_size else None
        return SearchPage(records, nxt)

    @staticmethod
    def _value(content: Mapping, key: str) -> str:
        v = content.get(key)
        if isinstance(v, Mapping):
            v = v.get("value")
        return v if isinstance(v, str) else ""

    def map_record(self, note: Mapping) -> PaperRecord:
        content = note.get("content") or {}
        abstract = self._value(content, "abstract")
        venue = self._value(content, "venue")
        code = self._value(content, "code") or find_code_url(abstract)
        return PaperRecord(
            paper_id=f"openreview:{note.get('id')}",
            title=self._value(content, "title"),
            abstract=abstract,
            methods_text=abstract,
            venue=venue,
            venue_tier=self.allowlist.classify(venue),
            has_full_text=bool(self._value(content, "pdf")),
            code_url=code or None,
            source=SourceKind.OPENREVIEW,
            methods_from_abstract=True,
        )


def search(source: LiteratureSource, keywords: Sequence[str], cursor: Optional[str] = None) -> SearchPage:
    return source.search(keywords, cursor)


def filter_eligible(records: Iterable[PaperRecord]) -> list[PaperRecord]:
    return [r for r in records if r.eligible]


def build_pool(
    keywords: Sequence[str],
    sources: Sequence[LiteratureSource],
    target_size: int = DEFAULT_POOL_SIZE,
    max_pages: int = 50,
    backoff: float = 2.0,
    created_iteration: int = 1,
) -> CandidatePool:
    """Merge eligible, deduplicated records from ``sources`` (in order) up to ``target_size``."""
    kws = _require_keywords(keywords)
    seen: set[str] = set()
    papers: list[PaperRecord] = []
    for source in sources:
        cursor: Optional[str] = None
        for _ in range(max_pages):
            if len(papers) >= target_size:
                break
            try:
                page = source.search(kws, cursor)
            except RateLimited:
                logger.warning("%s rate limited; backing off %.1fs", getattr(source, "name", source), backoff)
                time.sleep(backoff)
                continue
            except SourceUnavailable as exc:
                logger.warning("source %s unavailable: %s", getattr(source, "name", source), exc)
                break
            for rec in filter_eligible(page.records):
                if rec.paper_id in seen:
                    continue
                seen.add(rec.paper_id)
                papers.append(rec)
                if len(papers) >= target_size:
                    break
            cursor = page.next_cursor
            if cursor is None:
                break
    if not papers:
        raise PoolEmpty(f"no eligible papers for keywords {kws}")
    if len(papers) < target_size:
        logger.warning("candidate pool shortfall: %d of %d eligible papers found", len(papers), target_size)
    return CandidatePool(papers, kws, target_size, created_iteration)
