"""Probabilistic rankers over the inverted index.

Query likelihood with Dirichlet smoothing, BM25, a sequential-dependence
scorer mixing unigram/ordered-window/unordered-window evidence, and
passage-based relevance-model query expansion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .corpus import CandidateSet, InvertedIndex, Passage, segment_passages

BM25_PRESETS = {
    "bm25a": (0.9, 0.4),
    "bm25b": (3.44, 0.87),
}


@dataclass
class QLConfig:
    mu: float = 1250.0
    field: str = "body"

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError("mu must be > 0")


@dataclass
class BM25Config:
    k1: float = 0.9
    b: float = 0.4
    field: str = "body"

    def __post_init__(self):
        if self.k1 < 0:
            raise ValueError("k1 must be >= 0")
        if not 0.0 <= self.b <= 1.0:
            raise ValueError("b must be in [0, 1]")


@dataclass
class SDMConfig:
    order: int = 3
    lambda_t: float = 0.90
    lambda_o: float = 0.034
    lambda_u: float = 0.066
    window_factor: int = 4      # unordered window spans window_factor * n positions
    mu: float = 1250.0
    field: str = "body"

    def __post_init__(self):
        if self.order < 2:
            raise ValueError("order must be >= 2")
        if abs(self.lambda_t + self.lambda_o + self.lambda_u - 1.0) > 1e-9:
            raise ValueError("lambda weights must sum to 1")


@dataclass
class PRFConfig:
    m: int = 10                 # feedback passages
    k: int = 50                 # expansion vocabulary size
    width: int = 75
    overlap: int = 25
    alpha: float = 0.5          # mass kept on the original query
    mu: float = 1250.0
    field: str = "body"

    def __post_init__(self):
        if self.m < 1 or self.k < 1:
            raise ValueError("m and k must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")


@dataclass
class WeightedQuery:
    """Distinct terms with non-negative weights summing to 1."""

    terms: list[tuple[str, float]]
    expanded: bool = True       # False when PRF fell back to the original query

    def __post_init__(self):
        seen = set()
        total = 0.0
        for term, w in self.terms:
            if term in seen:
                raise ValueError(f"duplicate term {term!r}")
            if w < 0:
                raise ValueError(f"negative weight for {term!r}")
            seen.add(term)
            total += w
        if self.terms and abs(total - 1.0) > 1e-9:
            raise ValueError(f"weights sum to {total}, expected 1")


def _dirichlet_term(tf: int, cf: int, doc_len: int, coll_len: int, mu: float) -> float:
    return math.log((tf + mu * cf / coll_len) / (doc_len + mu))


def ql_score(query_tokens: list[str], doc_id: str, index: InvertedIndex, config: QLConfig = QLConfig()) -> float:
    """Dirichlet-smoothed log query likelihood; zero-cf terms skipped."""
    index.require_doc(doc_id)
    f = config.field
    coll_len = index.collection_length(f)
    doc_len = index.doc_length(f, doc_id)
    score = 0.0
    for term in query_tokens:
        cf = index.cf(f, term)
        if cf == 0:
            continue
        score += _dirichlet_term(index.tf(f, term, doc_id), cf, doc_len, coll_len, config.mu)
    return score


def bm25_score(query_tokens: list[str], doc_id: str, index: InvertedIndex, config: BM25Config = BM25Config()) -> float:
    """BM25 with the non-negative idf variant ln((N-df+0.5)/(df+0.5)+1)."""
    index.require_doc(doc_id)
    f = config.field
    n = index.num_docs
    avgdl = index.avg_doc_length(f)
    doc_len = index.doc_length(f, doc_id)
    score = 0.0
    for term in query_tokens:
        df = index.df(f, term)
        if df == 0:
            continue
        tf = index.tf(f, term, doc_id)
        idf = math.log((n - df + 0.5) / (df + 0.5) + 1.0)
        denom = tf + config.k1 * (1.0 - config.b + config.b * doc_len / avgdl)
        score += idf * tf * (config.k1 + 1.0) / denom
    return score


def ordered_count(position_lists: list[list[int]]) -> int:
    """Occurrences where the terms appear contiguously in the given order."""
    if any(not p for p in position_lists):
        return 0
    rest = [set(p) for p in position_lists[1:]]
    count = 0
    for start in position_lists[0]:
        if all((start + off) in s for off, s in enumerate(rest, start=1)):
            count += 1
    return count


def unordered_count(position_lists: list[list[int]], window: int) -> int:
    """Co-occurrence events of all terms within `window` consecutive positions.

    Greedy matching: each term occurrence participates in at most one counted
    event.  Pointers advance past every consumed position; otherwise only the
    earliest candidate advances.
    """
    if any(not p for p in position_lists):
        return 0
    ptrs = [0] * len(position_lists)
    count = 0
    while all(ptrs[i] < len(position_lists[i]) for i in range(len(ptrs))):
        current = [position_lists[i][ptrs[i]] for i in range(len(ptrs))]
        span = max(current) - min(current) + 1
        if span <= window:
            count += 1
            for i in range(len(ptrs)):
                ptrs[i] += 1
        else:
            ptrs[current.index(min(current))] += 1
    return count


class SDMScorer:
    """Unigram + ordered + unordered dependence scoring with Dirichlet smoothing.

    N-gram collection statistics are derived from positional postings on first
    use and memoized per (kind, gram) key; a built scorer is read-only.
    """

    def __init__(self, index: InvertedIndex, config: SDMConfig = SDMConfig()):
        self.index = index
        self.config = config
        self._cf_cache: dict[tuple, int] = {}

    def _gram_docs(self, gram: tuple[str, ...]) -> list[str]:
        f = self.config.field
        doc_sets = []
        for term in gram:
            docs = self.index.posting_docs(f, term)
            if not docs:
                return []
            doc_sets.append(docs)
        smallest = min(doc_sets, key=len)
        return [d for d in smallest if all(d in s for s in doc_sets)]

    def _positions(self, gram: tuple[str, ...], doc_id: str) -> list[list[int]]:
        f = self.config.field
        return [self.index.positions(f, t, doc_id) for t in gram]

    def _doc_count(self, kind: str, gram: tuple[str, ...], doc_id: str) -> int:
        lists = self._positions(gram, doc_id)
        if kind == "ordered":
            return ordered_count(lists)
        return unordered_count(lists, self.config.window_factor * len(gram))

    def _collection_frequency(self, kind: str, gram: tuple[str, ...]) -> int:
        key = (kind, gram)
        cached = self._cf_cache.get(key)
        if cached is not None:
            return cached
        total = sum(self._doc_count(kind, gram, d) for d in self._gram_docs(gram))
        self._cf_cache[key] = total
        return total

    def _component(self, kind: str, grams: list[tuple[str, ...]], doc_id: str) -> float:
        f = self.config.field
        coll_len = self.index.collection_length(f)
        doc_len = self.index.doc_length(f, doc_id)
        score = 0.0
        for gram in grams:
            cf = self._collection_frequency(kind, gram)
            if cf == 0:
                continue
            tf = self._doc_count(kind, gram, doc_id)
            score += _dirichlet_term(tf, cf, doc_len, coll_len, self.config.mu)
        return score

    def score(self, query_tokens: list[str], doc_id: str) -> float:
        self.index.require_doc(doc_id)
        cfg = self.config
        uni = ql_score(query_tokens, doc_id, self.index, QLConfig(mu=cfg.mu, field=cfg.field))
        grams = [
            tuple(query_tokens[i:i + n])
            for n in range(2, cfg.order + 1)
            for i in range(len(query_tokens) - n + 1)
        ]
        if not grams:
            return cfg.lambda_t * uni
        ordered = self._component("ordered", grams, doc_id)
        unordered = self._component("unordered", grams, doc_id)
        return cfg.lambda_t * uni + cfg.lambda_o * ordered + cfg.lambda_u * unordered


def sdm_score(query_tokens: list[str], doc_id: str, index: InvertedIndex, config: SDMConfig = SDMConfig()) -> float:
    return SDMScorer(index, config).score(query_tokens, doc_id)


def _passage_ql(query_tokens, passage_tf, passage_len, index, field, mu) -> float:
    coll_len = index.collection_length(field)
    score = 0.0
    for term in query_tokens:
        cf = index.cf(field, term)
        if cf == 0:
            continue
        score += _dirichlet_term(passage_tf.get(term, 0), cf, passage_len, coll_len, mu)
    return score


def rm1_expand(
    query_tokens: list[str],
    index: InvertedIndex,
    corpus,
    config: PRFConfig = PRFConfig(),
    candidate_doc_ids: list[str] | None = None,
) -> WeightedQuery:
    """Relevance-model expansion from top-scoring passages.

    Passages of every candidate body (whole corpus when no candidates are
    given) containing at least one query term are ranked by passage query
    likelihood; term mass from the top m passages, weighted by exp(QL), gives
    the expansion distribution, cut to the k strongest terms and interpolated
    with the original query at weight alpha.
    """
    doc_ids = candidate_doc_ids if candidate_doc_ids is not None else [d.doc_id for d in corpus]
    qset = set(query_tokens)

    scored: list[tuple[float, Passage, dict[str, int]]] = []
    for doc_id in doc_ids:
        body = corpus.get(doc_id).body_tokens
        for passage in segment_passages(doc_id, body, config.width, config.overlap):
            if not passage.tokens:
                continue
            tf: dict[str, int] = {}
            for t in passage.tokens:
                tf[t] = tf.get(t, 0) + 1
            if not qset.intersection(tf):
                continue
            score = _passage_ql(query_tokens, tf, len(passage.tokens), index, config.field, config.mu)
            scored.append((score, passage, tf))

    original = _query_mle(query_tokens)
    if not scored:
        return WeightedQuery(original, expanded=False)

    scored.sort(key=lambda item: (-item[0], item[1].doc_id, item[1].start))
    top = scored[:config.m]
    max_log = top[0][0]

    weights: dict[str, float] = {}
    for log_score, passage, tf in top:
        p_q = math.exp(log_score - max_log)
        plen = len(passage.tokens)
        for term, count in tf.items():
            weights[term] = weights.get(term, 0.0) + p_q * count / plen

    best = sorted(weights.items(), key=lambda kv: (-kv[1], kv[0]))[:config.k]
    total = sum(w for _, w in best)
    expansion = {t: w / total for t, w in best}

    combined: dict[str, float] = {t: config.alpha * w for t, w in original}
    for term, w in expansion.items():
        combined[term] = combined.get(term, 0.0) + (1.0 - config.alpha) * w
    terms = sorted(combined.items(), key=lambda kv: (-kv[1], kv[0]))
    return WeightedQuery(terms, expanded=True)


def _query_mle(query_tokens: list[str]) -> list[tuple[str, float]]:
    counts: dict[str, int] = {}
    for t in query_tokens:
        counts[t] = counts.get(t, 0) + 1
    n = len(query_tokens)
    return [(t, c / n) for t, c in counts.items()]


def weighted_ql_score(wq: WeightedQuery, doc_id: str, index: InvertedIndex, mu: float = 1250.0, field: str = "body") -> float:
    """Weight-mixed Dirichlet log likelihood; zero-cf terms skipped."""
    index.require_doc(doc_id)
    coll_len = index.collection_length(field)
    doc_len = index.doc_length(field, doc_id)
    score = 0.0
    for term, weight in wq.terms:
        cf = index.cf(field, term)
        if cf == 0:
            continue
        score += weight * _dirichlet_term(index.tf(field, term, doc_id), cf, doc_len, coll_len, mu)
    return score


class PRFScorer:
    """Expands each query once, then scores documents with the weighted-QL of the expansion."""

    def __init__(self, index: InvertedIndex, corpus, config: PRFConfig = PRFConfig(),
                 candidates: CandidateSet | None = None):
        self.index = index
        self.corpus = corpus
        self.config = config
        self.candidates = candidates
        self._cache: dict[tuple[str, ...], WeightedQuery] = {}

    def expand(self, query_tokens: list[str], query_id: str | None = None) -> WeightedQuery:
        key = tuple(query_tokens)
        if key not in self._cache:
            doc_ids = None
            if self.candidates is not None and query_id is not None and query_id in self.candidates:
                doc_ids = self.candidates.doc_ids(query_id)
            self._cache[key] = rm1_expand(query_tokens, self.index, self.corpus, self.config, doc_ids)
        return self._cache[key]

    def score(self, query_tokens: list[str], doc_id: str, query_id: str | None = None) -> float:
        wq = self.expand(query_tokens, query_id)
        return weighted_ql_score(wq, doc_id, self.index, self.config.mu, self.config.field)


def rank(scorer, query_tokens: list[str], docs, run_id: str = "run", query_id: str = "q", threads: int = 1) -> CandidateSet:
    """Score docs (iterable of ids, or an InvertedIndex for all docs) and sort.

    Descending score, ties broken by ascending doc_id, ranks 1-based.  scorer
    is any callable (query_tokens, doc_id) -> float.
    """
    if isinstance(docs, InvertedIndex):
        doc_ids = list(docs.doc_ids)
    else:
        doc_ids = list(docs)
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            scores = list(pool.map(lambda d: scorer(query_tokens, d), doc_ids))
        scored = list(zip(doc_ids, scores))
    else:
        scored = [(d, scorer(query_tokens, d)) for d in doc_ids]
    cands = CandidateSet(run_id)
    cands.set_query(query_id, scored)
    return cands
