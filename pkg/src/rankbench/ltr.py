"""Query-document feature extraction and a two-hidden-layer neural reranker.

The default 20-feature schema: score and reciprocal rank from five registered
runs (the neural ranker, the dependence and feedback scorers, two BM25
presets), eight dual-embedding similarities (title/body x four variants),
query length, and domain quality.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .corpus import CandidateSet, Corpus, Document, Qrels, Query
from .embed import DESM_VARIANTS, EmbeddingPair, desm_score

DEFAULT_RUNS = ("duetmf", "sdm", "prf", "bm25a", "bm25b")
DESM_FIELDS = ("title", "body")


class SchemaError(ValueError):
    """Feature vector does not line up with the schema."""


@dataclass(frozen=True)
class FeatureSchema:
    names: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise SchemaError("feature names must be unique")

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError as exc:
            raise SchemaError(f"unknown feature {name!r}") from exc


def default_schema(runs=DEFAULT_RUNS) -> FeatureSchema:
    names: list[str] = []
    for run in runs:
        names.append(f"{run}.score")
        names.append(f"{run}.rrank")
    for field in DESM_FIELDS:
        for variant in DESM_VARIANTS:
            names.append(f"desm.{field}.{variant.lower()}")
    names.append("query_length")
    names.append("domain_quality")
    return FeatureSchema(tuple(names))


class FeatureVector(NamedTuple):
    values: np.ndarray
    missing: np.ndarray  # bool, per feature: run imputations


class DomainStats:
    """Domain frequencies among positively-labeled training docs and the collection."""

    def __init__(self):
        self.pos_counts: dict[str, int] = {}
        self.coll_counts: dict[str, int] = {}
        self.total_pos = 0
        self.total_coll = 0

    @classmethod
    def build(cls, corpus: Corpus, qrels: Qrels, threshold: int = 1) -> "DomainStats":
        stats = cls()
        for doc in corpus:
            stats.coll_counts[doc.domain] = stats.coll_counts.get(doc.domain, 0) + 1
            stats.total_coll += 1
        for qid in qrels.query_ids():
            for doc_id, grade in qrels.judged(qid).items():
                if grade >= threshold and doc_id in corpus:
                    domain = corpus.get(doc_id).domain
                    stats.pos_counts[domain] = stats.pos_counts.get(domain, 0) + 1
                    stats.total_pos += 1
        return stats

    @property
    def num_domains(self) -> int:
        return max(1, len(self.coll_counts))


def domain_quality(domain: str, stats: DomainStats, eps: float = 1.0) -> float:
    """Smoothed ratio of a domain's positive-label rate to its collection rate."""
    d = stats.num_domains
    pos_rate = (stats.pos_counts.get(domain, 0) + eps) / (stats.total_pos + eps * d)
    coll_rate = (stats.coll_counts.get(domain, 0) + eps) / (stats.total_coll + eps * d)
    return pos_rate / coll_rate


class FeatureExtractor:
    """Builds schema-aligned vectors for (query, document) pairs.

    A document absent from a run gets that run's per-query minimum score minus
    one, reciprocal rank 0, and its missing flag set.
    """

    def __init__(self, schema: FeatureSchema, runs: dict[str, CandidateSet],
                 embeddings: EmbeddingPair, stats: DomainStats):
        self.schema = schema
        self.runs = runs
        self.embeddings = embeddings
        self.stats = stats
        self._run_names = [n[:-len(".score")] for n in schema.names if n.endswith(".score")]
        for run in self._run_names:
            if run not in runs:
                raise SchemaError(f"schema wants run {run!r} but no such run was registered")
        # per run, per query: doc -> (score, rank), plus the query's minimum score
        self._lookup: dict[str, dict[str, tuple[dict[str, tuple[float, int]], float]]] = {}
        for run, cands in runs.items():
            per_query = {}
            for qid in cands.query_ids():
                ranked = cands.ranking(qid)
                table = {d: (s, i) for i, (d, s) in enumerate(ranked, start=1)}
                low = min(s for _, s in ranked) if ranked else 0.0
                per_query[qid] = (table, low)
            self._lookup[run] = per_query

    def vector(self, query: Query, doc: Document) -> FeatureVector:
        values = np.zeros(len(self.schema))
        missing = np.zeros(len(self.schema), dtype=bool)
        pos = 0
        for run in self._run_names:
            table, low = self._lookup[run].get(query.query_id, ({}, 0.0))
            entry = table.get(doc.doc_id)
            if entry is None:
                values[pos] = low - 1.0
                values[pos + 1] = 0.0
                missing[pos] = missing[pos + 1] = True
            else:
                score, rank = entry
                values[pos] = score
                values[pos + 1] = 1.0 / rank
            pos += 2
        for field in DESM_FIELDS:
            for variant in DESM_VARIANTS:
                values[pos] = desm_score(query.tokens, doc.tokens(field), self.embeddings, variant).score
                pos += 1
        values[pos] = float(len(query.tokens))
        values[pos + 1] = domain_quality(doc.domain, self.stats)
        if not np.all(np.isfinite(values)):
            raise SchemaError(f"non-finite feature for query {query.query_id!r} doc {doc.doc_id!r}")
        return FeatureVector(values, missing)

    def matrix(self, query: Query, docs: list[Document]) -> np.ndarray:
        return np.stack([self.vector(query, d).values for d in docs])


def extract_features(query: Query, doc: Document, runs: dict[str, CandidateSet],
                     embeddings: EmbeddingPair, stats: DomainStats, schema: FeatureSchema) -> FeatureVector:
    return FeatureExtractor(schema, runs, embeddings, stats).vector(query, doc)


# -- feature files ---------------------------------------------------------------

def write_features(path, schema: FeatureSchema, rows: list[tuple[str, str, np.ndarray]]) -> None:
    """TSV with a header row: qid, docid, then one column per schema feature."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("qid\tdocid\t" + "\t".join(schema.names) + "\n")
        for qid, docid, values in rows:
            if len(values) != len(schema):
                raise SchemaError(f"row ({qid}, {docid}) has {len(values)} values, schema has {len(schema)}")
            fh.write(f"{qid}\t{docid}\t" + "\t".join(f"{v:.9g}" for v in values) + "\n")


def read_features(path) -> tuple[FeatureSchema, dict[str, list[tuple[str, np.ndarray]]]]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header[:2] != ["qid", "docid"]:
            raise SchemaError(f"{path}: bad header {header[:2]}")
        schema = FeatureSchema(tuple(header[2:]))
        by_query: dict[str, list[tuple[str, np.ndarray]]] = {}
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != len(schema) + 2:
                raise SchemaError(f"{path}:{lineno}: expected {len(schema) + 2} columns, got {len(parts)}")
            values = np.asarray([float(v) for v in parts[2:]])
            by_query.setdefault(parts[0], []).append((parts[1], values))
    return schema, by_query


# -- model -----------------------------------------------------------------------

class LTRModel:
    """dense(F -> h1) relu dense(h1 -> h2) relu dense(h2 -> 1), z-normalized inputs."""

    def __init__(self, schema: FeatureSchema, hidden: tuple[int, int] = (1024, 1024), seed: int = 0):
        self.schema = schema
        self.hidden = tuple(hidden)
        f = len(schema)
        h1, h2 = self.hidden
        rng = np.random.default_rng(seed)

        def glorot(shape, fan_in, fan_out):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-limit, limit, size=shape)

        self.params = {
            "w1": T.Tensor(glorot((f, h1), f, h1), requires_grad=True),
            "b1": T.Tensor(np.zeros(h1), requires_grad=True),
            "w2": T.Tensor(glorot((h1, h2), h1, h2), requires_grad=True),
            "b2": T.Tensor(np.zeros(h2), requires_grad=True),
            "w3": T.Tensor(glorot((h2, 1), h2, 1), requires_grad=True),
            "b3": T.Tensor(np.zeros(1), requires_grad=True),
        }
        self.norm_mean = np.zeros(f)
        self.norm_std = np.ones(f)

    def parameters(self) -> list[tuple[str, T.Tensor]]:
        return list(self.params.items())

    def set_normalization(self, features: np.ndarray) -> None:
        """Fit per-feature mean/std; zero-variance dims normalize to 0."""
        self.norm_mean = features.mean(axis=0)
        std = features.std(axis=0)
        self.norm_std = np.where(std > 1e-12, std, 1.0)

    def normalize(self, features: np.ndarray) -> np.ndarray:
        return (features - self.norm_mean) / self.norm_std

    def forward_matrix(self, tape, x: T.Tensor) -> T.Tensor:
        p = self.params
        h = T.relu(tape, T.dense(tape, x, p["w1"], p["b1"]))
        h = T.relu(tape, T.dense(tape, h, p["w2"], p["b2"]))
        return T.dense(tape, h, p["w3"], p["b3"])

    def score_matrix(self, features: np.ndarray) -> np.ndarray:
        x = T.Tensor(self.normalize(np.atleast_2d(features)))
        return self.forward_matrix(None, x).data[:, 0]

    def score(self, features: np.ndarray) -> float:
        return float(self.score_matrix(features[None, :])[0])

    def save(self, path) -> None:
        tensors = {name: p.data for name, p in self.parameters()}
        tensors["norm_mean"] = self.norm_mean
        tensors["norm_std"] = self.norm_std
        meta = {"kind": "ltr", "schema": list(self.schema.names), "hidden": list(self.hidden)}
        T.save_tensors(path, tensors, meta)

    @classmethod
    def load(cls, path) -> "LTRModel":
        tensors, meta = T.load_tensors(path)
        if meta.get("kind") != "ltr":
            raise T.CheckpointError(f"{path} is not an LTR checkpoint")
        model = cls(FeatureSchema(tuple(meta["schema"])), tuple(meta["hidden"]))
        for name, p in model.parameters():
            p.data = tensors[name]
        model.norm_mean = tensors["norm_mean"]
        model.norm_std = tensors["norm_std"]
        return model


def training_pairs(features_by_query: dict[str, list[tuple[str, np.ndarray]]], qrels: Qrels,
                   threshold: int = 1, max_pairs_per_query: int | None = None,
                   rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """All (positive, negative) feature pairs within each query, optionally capped."""
    pos_rows: list[np.ndarray] = []
    neg_rows: list[np.ndarray] = []
    for qid, entries in features_by_query.items():
        rel = qrels.relevant(qid, threshold)
        positives = [v for d, v in entries if d in rel]
        negatives = [v for d, v in entries if d not in rel]
        if not positives or not negatives:
            continue
        pairs = [(p, n) for p in positives for n in negatives]
        if max_pairs_per_query is not None and len(pairs) > max_pairs_per_query:
            if rng is None:
                rng = np.random.default_rng(0)
            keep = rng.choice(len(pairs), size=max_pairs_per_query, replace=False)
            pairs = [pairs[i] for i in sorted(keep)]
        for p, n in pairs:
            pos_rows.append(p)
            neg_rows.append(n)
    if not pos_rows:
        raise ValueError("no trainable (positive, negative) pair in the features")
    return np.stack(pos_rows), np.stack(neg_rows)


def train_ltr(features_by_query: dict[str, list[tuple[str, np.ndarray]]], qrels: Qrels,
              schema: FeatureSchema, lr: float = 0.001, batch: int = 128, epochs: int = 20,
              seed: int = 0, hidden: tuple[int, int] = (1024, 1024),
              max_pairs_per_query: int | None = None) -> tuple[LTRModel, list[float]]:
    """Pairwise logistic training on within-query (positive, negative) pairs.

    Normalization statistics come from the full training feature matrix and
    are stored on the returned model.  Deterministic under seed.
    """
    rng = np.random.default_rng(seed)
    model = LTRModel(schema, hidden, seed=seed)
    all_rows = np.stack([v for entries in features_by_query.values() for _, v in entries])
    model.set_normalization(all_rows)

    x_pos, x_neg = training_pairs(features_by_query, qrels, rng=rng, max_pairs_per_query=max_pairs_per_query)
    x_pos = model.normalize(x_pos)
    x_neg = model.normalize(x_neg)

    params = [p for _, p in model.parameters()]
    state = T.AdamState(lr=lr)
    curve: list[float] = []
    n = len(x_pos)
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, batch):
            idx = order[lo:lo + batch]
            for p in params:
                p.zero_grad()
            tape = T.Tape()
            s_pos = model.forward_matrix(tape, T.Tensor(x_pos[idx]))
            s_neg = model.forward_matrix(tape, T.Tensor(x_neg[idx]))
            loss = T.mean(tape, T.ranknet_loss(tape, s_pos, s_neg))
            T.backward(tape, loss)
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            T.adam_step(params, grads, state)
            total += loss.item() * len(idx)
        curve.append(total / n)
    for p in params:
        p.zero_grad()
    return model, curve


def rerank(model: LTRModel, candidates: CandidateSet,
           features_by_query: dict[str, list[tuple[str, np.ndarray]]], run_id: str = "ltr") -> CandidateSet:
    """Reorder each query's candidates by model score (doc_id breaks ties)."""
    out = CandidateSet(run_id)
    for qid in candidates.query_ids():
        table = dict(features_by_query.get(qid, []))
        doc_ids = candidates.doc_ids(qid)
        missing = [d for d in doc_ids if d not in table]
        if missing:
            raise SchemaError(f"query {qid!r}: no features for candidates {missing[:3]}")
        matrix = np.stack([table[d] for d in doc_ids])
        scores = model.score_matrix(matrix)
        out.set_query(qid, list(zip(doc_ids, scores.tolist())))
    return out
