"""Corpus ingestion, tokenization, and positional multi-field inverted indexes.

File formats:
    documents TSV   doc_id \\t url \\t title \\t body
    queries TSV     query_id \\t text
    qrels (TREC)    qid 0 docid grade          (space separated)
"""

from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

FIELDS = ("url", "title", "body")

_TOKEN_RE = re.compile(r"[0-9a-z]+")
_SCHEME_RE = re.compile(r"^[a-zA-Z][a-zA-Z0-9+.-]*://")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on any non-alphanumeric character."""
    return _TOKEN_RE.findall(text.lower())


def tokenize_url(url: str) -> list[str]:
    """Tokenize a URL, dropping the scheme prefix first."""
    return tokenize(_SCHEME_RE.sub("", url))


def extract_domain(raw_url: str) -> str:
    """Lowercase host of a URL: part between the scheme and the first '/', port stripped.

    Returns "" when no host can be found.
    """
    rest = _SCHEME_RE.sub("", raw_url)
    host = rest.split("/", 1)[0]
    if "@" in host:
        host = host.rsplit("@", 1)[1]
    host = host.split(":", 1)[0]
    return host.strip().lower()


@dataclass
class Document:
    doc_id: str
    raw_url: str
    url_tokens: list[str]
    title_tokens: list[str]
    body_tokens: list[str]
    domain: str

    @classmethod
    def from_fields(cls, doc_id: str, url: str, title: str, body: str) -> "Document":
        return cls(
            doc_id=doc_id,
            raw_url=url,
            url_tokens=tokenize_url(url),
            title_tokens=tokenize(title),
            body_tokens=tokenize(body),
            domain=extract_domain(url),
        )

    def tokens(self, field_name: str) -> list[str]:
        return getattr(self, f"{field_name}_tokens")


@dataclass
class Query:
    query_id: str
    tokens: list[str]

    @property
    def degenerate(self) -> bool:
        return not self.tokens


class CorpusError(ValueError):
    """Malformed corpus input (bad line, duplicate id, empty corpus)."""


class Corpus:
    """In-memory document store keyed by doc_id, insertion ordered."""

    def __init__(self):
        self.docs: dict[str, Document] = {}

    def add(self, doc: Document) -> None:
        if doc.doc_id in self.docs:
            raise CorpusError(f"duplicate doc_id {doc.doc_id!r}")
        self.docs[doc.doc_id] = doc

    def __len__(self) -> int:
        return len(self.docs)

    def __iter__(self):
        return iter(self.docs.values())

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self.docs

    def get(self, doc_id: str) -> Document:
        return self.docs[doc_id]


def ingest_corpus(lines) -> Corpus:
    """Build a Corpus from an iterable of TSV lines (or an open file).

    Each line must carry exactly 4 tab-separated columns.
    """
    corpus = Corpus()
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\n")
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise CorpusError(f"line {lineno}: expected 4 fields, got {len(parts)}")
        doc_id, url, title, body = parts
        if not doc_id:
            raise CorpusError(f"line {lineno}: empty doc_id")
        if doc_id in corpus:
            raise CorpusError(f"line {lineno}: duplicate doc_id {doc_id!r}")
        corpus.add(Document.from_fields(doc_id, url, title, body))
    return corpus


def read_documents_tsv(path) -> Corpus:
    with open(path, encoding="utf-8") as fh:
        return ingest_corpus(fh)


def read_queries_tsv(path) -> dict[str, Query]:
    queries: dict[str, Query] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise CorpusError(f"line {lineno}: expected 2 fields, got {len(parts)}")
            qid, text = parts
            if qid in queries:
                raise CorpusError(f"line {lineno}: duplicate query_id {qid!r}")
            queries[qid] = Query(qid, tokenize(text))
    return queries


class Qrels:
    """Graded relevance judgments; absent pairs read as grade 0."""

    def __init__(self):
        self._grades: dict[str, dict[str, int]] = {}

    def set(self, query_id: str, doc_id: str, grade: int) -> None:
        if grade < 0:
            raise ValueError(f"negative grade for ({query_id}, {doc_id})")
        self._grades.setdefault(query_id, {})[doc_id] = grade

    def grade(self, query_id: str, doc_id: str) -> int:
        return self._grades.get(query_id, {}).get(doc_id, 0)

    def judged(self, query_id: str) -> dict[str, int]:
        return self._grades.get(query_id, {})

    def relevant(self, query_id: str, threshold: int = 1) -> set[str]:
        return {d for d, g in self.judged(query_id).items() if g >= threshold}

    def query_ids(self) -> list[str]:
        return list(self._grades)

    def __len__(self) -> int:
        return sum(len(v) for v in self._grades.values())


def read_qrels(path) -> Qrels:
    qrels = Qrels()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise CorpusError(f"line {lineno}: expected 4 fields, got {len(parts)}")
            qid, _, docid, grade = parts
            try:
                qrels.set(qid, docid, int(grade))
            except ValueError as exc:
                raise CorpusError(f"line {lineno}: {exc}") from exc
    return qrels


def write_qrels(qrels: Qrels, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid in qrels.query_ids():
            for docid, grade in qrels.judged(qid).items():
                fh.write(f"{qid} 0 {docid} {grade}\n")


class CandidateSet:
    """Per-query ranked candidates (doc_id, score), non-increasing by score."""

    def __init__(self, run_id: str = "run"):
        self.run_id = run_id
        self._ranked: dict[str, list[tuple[str, float]]] = {}

    def set_query(self, query_id: str, scored: list[tuple[str, float]], presorted: bool = False) -> None:
        """Store candidates for a query; sorts by (-score, doc_id) unless presorted."""
        seen = set()
        for doc_id, _ in scored:
            if doc_id in seen:
                raise ValueError(f"duplicate doc_id {doc_id!r} for query {query_id!r}")
            seen.add(doc_id)
        if not presorted:
            scored = sorted(scored, key=lambda ds: (-ds[1], ds[0]))
        self._ranked[query_id] = list(scored)

    def ranking(self, query_id: str) -> list[tuple[str, float]]:
        return self._ranked.get(query_id, [])

    def doc_ids(self, query_id: str) -> list[str]:
        return [d for d, _ in self.ranking(query_id)]

    def rank_of(self, query_id: str, doc_id: str) -> int:
        """1-based rank, or 0 when absent."""
        for i, (d, _) in enumerate(self.ranking(query_id), start=1):
            if d == doc_id:
                return i
        return 0

    def query_ids(self) -> list[str]:
        return list(self._ranked)

    def __contains__(self, query_id: str) -> bool:
        return query_id in self._ranked


@dataclass
class Passage:
    doc_id: str
    start: int
    tokens: list[str]


def segment_passages(doc_id: str, body_tokens: list[str], width: int = 75, overlap: int = 25) -> list[Passage]:
    """Tile a body into fixed-width windows with the given overlap.

    Windows start at 0, width-overlap, 2*(width-overlap), ...; the final window
    may be shorter.  A body shorter than one window yields exactly one passage.
    """
    if width <= overlap or overlap < 0:
        raise ValueError(f"need width > overlap >= 0, got width={width} overlap={overlap}")
    stride = width - overlap
    passages = []
    start = 0
    n = len(body_tokens)
    while True:
        window = body_tokens[start:start + width]
        passages.append(Passage(doc_id, start, window))
        if start + width >= n:
            break
        start += stride
    return passages


@dataclass
class _FieldIndex:
    postings: dict[str, dict[str, list[int]]] = field(default_factory=dict)
    doc_length: dict[str, int] = field(default_factory=dict)
    collection_length: int = 0

    def merge(self, other: "_FieldIndex") -> None:
        for term, docs in other.postings.items():
            self.postings.setdefault(term, {}).update(docs)
        self.doc_length.update(other.doc_length)
        self.collection_length += other.collection_length


class InvertedIndex:
    """Positional postings per field plus the statistics probabilistic scorers need."""

    def __init__(self, fields=FIELDS):
        self.fields = tuple(fields)
        self._by_field = {f: _FieldIndex() for f in self.fields}
        self.doc_ids: list[str] = []
        self._doc_set: set[str] = set()

    # -- construction -------------------------------------------------------

    def _index_doc(self, doc: Document) -> None:
        for f in self.fields:
            fi = self._by_field[f]
            tokens = doc.tokens(f)
            fi.doc_length[doc.doc_id] = len(tokens)
            fi.collection_length += len(tokens)
            for pos, term in enumerate(tokens):
                fi.postings.setdefault(term, {}).setdefault(doc.doc_id, []).append(pos)

    # -- read API ------------------------------------------------------------

    @property
    def num_docs(self) -> int:
        return len(self.doc_ids)

    def has_doc(self, doc_id: str) -> bool:
        return doc_id in self._doc_set

    def require_doc(self, doc_id: str) -> None:
        if doc_id not in self._doc_set:
            raise KeyError(f"unknown doc_id {doc_id!r}")

    def positions(self, field_name: str, term: str, doc_id: str) -> list[int]:
        return self._by_field[field_name].postings.get(term, {}).get(doc_id, [])

    def postings(self, field_name: str, term: str) -> list[tuple[str, list[int]]]:
        return list(self._by_field[field_name].postings.get(term, {}).items())

    def posting_docs(self, field_name: str, term: str) -> dict[str, list[int]]:
        return self._by_field[field_name].postings.get(term, {})

    def tf(self, field_name: str, term: str, doc_id: str) -> int:
        return len(self.positions(field_name, term, doc_id))

    def cf(self, field_name: str, term: str) -> int:
        docs = self._by_field[field_name].postings.get(term, {})
        return sum(len(p) for p in docs.values())

    def df(self, field_name: str, term: str) -> int:
        return len(self._by_field[field_name].postings.get(term, {}))

    def doc_length(self, field_name: str, doc_id: str) -> int:
        return self._by_field[field_name].doc_length.get(doc_id, 0)

    def collection_length(self, field_name: str) -> int:
        return self._by_field[field_name].collection_length

    def avg_doc_length(self, field_name: str) -> float:
        return self.collection_length(field_name) / self.num_docs

    def vocabulary(self, field_name: str) -> list[str]:
        return list(self._by_field[field_name].postings)


def build_index(corpus: Corpus, fields=FIELDS, threads: int = 1) -> InvertedIndex:
    """Index a corpus over the given fields.

    With threads > 1 the corpus is partitioned, partitions are indexed
    independently, and partial indexes are merged in partition order, so the
    result is identical to the single-threaded build.
    """
    if len(corpus) == 0:
        raise CorpusError("cannot index an empty corpus")
    index = InvertedIndex(fields)
    docs = list(corpus)
    if threads > 1:
        chunk = max(1, (len(docs) + threads - 1) // threads)
        parts = [docs[i:i + chunk] for i in range(0, len(docs), chunk)]

        def build_part(part):
            sub = InvertedIndex(fields)
            for doc in part:
                sub._index_doc(doc)
            return sub

        with ThreadPoolExecutor(max_workers=threads) as pool:
            for part, sub in zip(parts, pool.map(build_part, parts)):
                for f in index.fields:
                    index._by_field[f].merge(sub._by_field[f])
                for doc in part:
                    index.doc_ids.append(doc.doc_id)
                    index._doc_set.add(doc.doc_id)
    else:
        for doc in docs:
            index._index_doc(doc)
            index.doc_ids.append(doc.doc_id)
            index._doc_set.add(doc.doc_id)
    return index
