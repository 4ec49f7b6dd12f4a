"""Ranking metrics (MRR, NDCG@k, MAP, Recall@k) and TREC run file round-trip."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

from .corpus import CandidateSet, Qrels


class RunFileError(ValueError):
    """Malformed TREC run file."""


class RunFile:
    """TREC-format ranked lists: per query, (doc_id, rank, score) with ranks 1..n."""

    def __init__(self, run_id: str = "run"):
        self.run_id = run_id
        self._queries: dict[str, list[tuple[str, int, float]]] = {}

    def set_query(self, query_id: str, ranked: list[tuple[str, int, float]]) -> None:
        seen = set()
        for i, (doc_id, rank, _) in enumerate(ranked, start=1):
            if rank != i:
                raise RunFileError(f"query {query_id!r}: rank {rank} at position {i} (must be contiguous from 1)")
            if doc_id in seen:
                raise RunFileError(f"query {query_id!r}: duplicate doc_id {doc_id!r}")
            seen.add(doc_id)
        self._queries[query_id] = list(ranked)

    def ranking(self, query_id: str) -> list[tuple[str, int, float]]:
        return self._queries.get(query_id, [])

    def query_ids(self) -> list[str]:
        return list(self._queries)

    def __len__(self) -> int:
        return len(self._queries)

    @classmethod
    def from_candidates(cls, candidates: CandidateSet) -> "RunFile":
        run = cls(candidates.run_id)
        for qid in candidates.query_ids():
            ranked = [(d, i, s) for i, (d, s) in enumerate(candidates.ranking(qid), start=1)]
            run.set_query(qid, ranked)
        return run

    def to_candidates(self) -> CandidateSet:
        cands = CandidateSet(self.run_id)
        for qid in self.query_ids():
            cands.set_query(qid, [(d, s) for d, _, s in self.ranking(qid)], presorted=True)
        return cands


def read_run(path) -> RunFile:
    """Read a 6-column TREC run file, validating rank contiguity per query."""
    run = RunFile()
    per_query: dict[str, list[tuple[str, int, float]]] = {}
    run_id = "run"
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise RunFileError(f"line {lineno}: expected 6 columns, got {len(parts)}")
            qid, _, docid, rank_s, score_s, run_id = parts
            try:
                rank = int(rank_s)
                score = float(score_s)
            except ValueError as exc:
                raise RunFileError(f"line {lineno}: {exc}") from exc
            rows = per_query.setdefault(qid, [])
            if rank != len(rows) + 1:
                raise RunFileError(f"line {lineno}: query {qid!r} rank {rank}, expected {len(rows) + 1}")
            if any(d == docid for d, _, _ in rows):
                raise RunFileError(f"line {lineno}: duplicate doc {docid!r} for query {qid!r}")
            rows.append((docid, rank, score))
    run.run_id = run_id
    for qid, rows in per_query.items():
        run.set_query(qid, rows)
    return run


def write_run(run: RunFile, path) -> None:
    """Write TREC format, scores at 6 decimals, atomically (temp file + rename)."""
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        for qid in run.query_ids():
            for docid, rank, score in run.ranking(qid):
                fh.write(f"{qid} Q0 {docid} {rank} {score:.6f} {run.run_id}\n")
    os.replace(tmp, path)


@dataclass
class MetricConfig:
    threshold: int = 1          # binary relevance cut for MRR/MAP/Recall
    recall_cutoff: int = 100    # 1000 for passage-style runs

    def __post_init__(self):
        if self.threshold < 1:
            raise ValueError("threshold must be >= 1")
        if self.recall_cutoff < 1:
            raise ValueError("recall_cutoff must be >= 1")


def _require_queries(run: RunFile):
    qids = run.query_ids()
    if not qids:
        raise ValueError("run has no queries to evaluate")
    return qids


def mrr(run: RunFile, qrels: Qrels, config: MetricConfig = MetricConfig()) -> float:
    """Mean reciprocal rank of the first relevant doc; 0 for queries with none retrieved."""
    total = 0.0
    qids = _require_queries(run)
    for qid in qids:
        rel = qrels.relevant(qid, config.threshold)
        for docid, rank, _ in run.ranking(qid):
            if docid in rel:
                total += 1.0 / rank
                break
    return total / len(qids)


def _dcg(grades: list[int], k: int) -> float:
    return sum((2 ** g - 1) / math.log2(r + 1) for r, g in enumerate(grades[:k], start=1))


def ndcg_at(run: RunFile, qrels: Qrels, k: int = 10) -> float:
    """NDCG@k with gain 2^grade - 1 and log2 discount; unjudged-positive-free queries count 0."""
    if k < 1:
        raise ValueError("k must be >= 1")
    total = 0.0
    qids = _require_queries(run)
    for qid in qids:
        judged = qrels.judged(qid)
        ideal = sorted(judged.values(), reverse=True)
        idcg = _dcg(ideal, k)
        if idcg == 0.0:
            continue
        grades = [judged.get(docid, 0) for docid, _, _ in run.ranking(qid)]
        total += _dcg(grades, k) / idcg
    return total / len(qids)


def average_precision(ranked_doc_ids: list[str], relevant: set[str]) -> float:
    """AP with denominator = total relevant in the judgments."""
    if not relevant:
        raise ValueError("average_precision needs at least one relevant doc")
    hits = 0
    total = 0.0
    for rank, docid in enumerate(ranked_doc_ids, start=1):
        if docid in relevant:
            hits += 1
            total += hits / rank
    return total / len(relevant)


def map_score(run: RunFile, qrels: Qrels, config: MetricConfig = MetricConfig()) -> float:
    """Mean average precision over queries that have at least one relevant doc."""
    value, _ = map_score_with_counts(run, qrels, config)
    return value


def map_score_with_counts(run: RunFile, qrels: Qrels, config: MetricConfig = MetricConfig()) -> tuple[float, int]:
    """(MAP, number of queries excluded for having no relevant docs)."""
    total = 0.0
    evaluated = 0
    excluded = 0
    for qid in _require_queries(run):
        rel = qrels.relevant(qid, config.threshold)
        if not rel:
            excluded += 1
            continue
        total += average_precision([d for d, _, _ in run.ranking(qid)], rel)
        evaluated += 1
    if evaluated == 0:
        return 0.0, excluded
    return total / evaluated, excluded


def recall_at(run: RunFile, qrels: Qrels, k: int | None = None, config: MetricConfig = MetricConfig()) -> float:
    value, _ = recall_at_with_counts(run, qrels, k, config)
    return value


def recall_at_with_counts(
    run: RunFile, qrels: Qrels, k: int | None = None, config: MetricConfig = MetricConfig()
) -> tuple[float, int]:
    """(mean recall at cutoff k, excluded-query count); k defaults to config.recall_cutoff."""
    if k is None:
        k = config.recall_cutoff
    if k < 1:
        raise ValueError("k must be >= 1")
    total = 0.0
    evaluated = 0
    excluded = 0
    for qid in _require_queries(run):
        rel = qrels.relevant(qid, config.threshold)
        if not rel:
            excluded += 1
            continue
        top = {d for d, rank, _ in run.ranking(qid) if rank <= k}
        total += len(top & rel) / len(rel)
        evaluated += 1
    if evaluated == 0:
        return 0.0, excluded
    return total / evaluated, excluded


def evaluate(run: RunFile, qrels: Qrels, metrics: list[str], config: MetricConfig = MetricConfig()) -> dict[str, float]:
    """Compute named metrics ("mrr", "ndcg@10", "map", "recall@100") for a run."""
    out: dict[str, float] = {}
    for name in metrics:
        base, _, arg = name.partition("@")
        base = base.strip().lower()
        if base == "mrr":
            out[name] = mrr(run, qrels, config)
        elif base == "ndcg":
            out[name] = ndcg_at(run, qrels, int(arg) if arg else 10)
        elif base == "map":
            out[name] = map_score(run, qrels, config)
        elif base == "recall":
            out[name] = recall_at(run, qrels, int(arg) if arg else None, config)
        else:
            raise ValueError(f"unknown metric {name!r}")
    return out
