"""Deterministic synthetic corpus/query/qrels generator.

Relevance is planted: each query owns reserved marker terms, injected into the
title/body of its designated relevant documents, so every ranker has a
learnable signal with a known ceiling.  Candidates are the engine's own
Dirichlet-smoothed query-likelihood top-k, and titles/URLs sample their words
from the body so field contents correlate the way real documents do.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, Qrels, Query, build_index, ingest_corpus
from .evaluation import RunFile, write_run, write_qrels
from .lexical import QLConfig, ql_score, rank
from .corpus import CandidateSet


@dataclass
class SynthConfig:
    num_docs: int = 1000
    num_queries: int = 200
    vocab_size: int = 500
    body_len_range: tuple[int, int] = (60, 180)
    markers_per_query: int = 2
    relevant_range: tuple[int, int] = (3, 8)
    num_domains: int = 20
    candidate_depth: int = 100
    seed: int = 7
    max_retries: int = 10

    def __post_init__(self):
        if self.num_docs < 2 or self.num_queries < 1 or self.vocab_size < 10:
            raise ValueError("config too small to generate anything useful")
        if self.relevant_range[0] < 1 or self.relevant_range[1] < self.relevant_range[0]:
            raise ValueError("bad relevant_range")
        if self.candidate_depth <= self.relevant_range[1]:
            raise ValueError("candidate_depth must exceed the maximum relevant count")


@dataclass
class SynthData:
    corpus: Corpus
    queries: dict[str, Query]
    qrels: Qrels
    candidates: CandidateSet
    markers: dict[str, list[str]] = field(default_factory=dict)
    document_lines: list[str] = field(default_factory=list)
    query_lines: list[str] = field(default_factory=list)

    def write(self, out_dir) -> dict[str, str]:
        """Write documents.tsv, queries.tsv, qrels.txt, candidates.run; returns paths."""
        os.makedirs(out_dir, exist_ok=True)
        paths = {
            "documents": os.path.join(out_dir, "documents.tsv"),
            "queries": os.path.join(out_dir, "queries.tsv"),
            "qrels": os.path.join(out_dir, "qrels.txt"),
            "candidates": os.path.join(out_dir, "candidates.run"),
        }
        with open(paths["documents"], "w", encoding="utf-8") as fh:
            fh.writelines(self.document_lines)
        with open(paths["queries"], "w", encoding="utf-8") as fh:
            fh.writelines(self.query_lines)
        write_qrels(self.qrels, paths["qrels"])
        write_run(RunFile.from_candidates(self.candidates), paths["candidates"])
        return paths


def _zipf_cumulative(n: int) -> np.ndarray:
    weights = 1.0 / np.arange(1, n + 1)
    return np.cumsum(weights / weights.sum())


def _draw(rng: np.random.Generator, cumulative: np.ndarray, size: int) -> np.ndarray:
    return np.searchsorted(cumulative, rng.random(size))


def generate(config: SynthConfig = SynthConfig()) -> SynthData:
    """Build the full synthetic set; byte-identical outputs under the same seed."""
    rng = np.random.default_rng(config.seed)
    vocab = [f"w{i:04d}" for i in range(config.vocab_size)]
    vocab_cum = _zipf_cumulative(config.vocab_size)
    domains = [f"domain{i:02d}.test" for i in range(config.num_domains)]
    domain_cum = _zipf_cumulative(config.num_domains)

    # documents: body from a Zipf draw, title/url words sampled from the body
    bodies: list[list[str]] = []
    titles: list[list[str]] = []
    urls: list[str] = []
    doc_domains: list[str] = []
    lo, hi = config.body_len_range
    for i in range(config.num_docs):
        body_len = int(rng.integers(lo, hi + 1))
        body = [vocab[j] for j in _draw(rng, vocab_cum, body_len)]
        title_len = int(rng.integers(3, 9))
        title = [body[int(j)] for j in rng.integers(0, body_len, size=title_len)]
        domain = domains[int(_draw(rng, domain_cum, 1)[0])]
        path_words = [body[int(j)] for j in rng.integers(0, body_len, size=2)]
        bodies.append(body)
        titles.append(title)
        urls.append(f"https://{domain}/{'-'.join(path_words)}-{i}")
        doc_domains.append(domain)

    # positive docs are drawn with a skew toward low-index domains
    good = config.num_domains // 4 or 1
    doc_weights = np.array([4.0 if domains.index(d) < good else 1.0 for d in doc_domains])
    doc_weights /= doc_weights.sum()

    qrels = Qrels()
    markers: dict[str, list[str]] = {}
    query_tokens: dict[str, list[str]] = {}
    planted: dict[str, list[tuple[int, int]]] = {}  # qid -> (doc index, grade)

    def plant_query(qid: str, attempt: int) -> None:
        marks = [f"qm{qid[1:]}x{j}{'' if attempt == 0 else chr(96 + attempt)}" for j in range(config.markers_per_query)]
        topic = vocab[int(_draw(rng, vocab_cum, 1)[0])]
        markers[qid] = marks
        query_tokens[qid] = marks + [topic]
        n_rel = int(rng.integers(config.relevant_range[0], config.relevant_range[1] + 1))
        chosen = rng.choice(config.num_docs, size=n_rel, replace=False, p=doc_weights)
        placements = []
        for doc_idx in sorted(int(c) for c in chosen):
            body = bodies[doc_idx]
            for mark in marks:
                body.insert(int(rng.integers(0, len(body) + 1)), mark)
            in_title = rng.random() < 0.5
            if in_title:
                titles[doc_idx] = titles[doc_idx] + marks
            grade = 2 if in_title else 1
            qrels.set(qid, f"D{doc_idx:05d}", grade)
            placements.append((doc_idx, grade))
        planted[qid] = placements

    def unplant_query(qid: str) -> None:
        prefix = f"qm{qid[1:]}x"
        for doc_idx, _ in planted[qid]:
            bodies[doc_idx] = [t for t in bodies[doc_idx] if not t.startswith(prefix)]
            titles[doc_idx] = [t for t in titles[doc_idx] if not t.startswith(prefix)]
        for doc_id in list(qrels.judged(qid)):
            qrels.set(qid, doc_id, 0)
        qrels._grades.pop(qid, None)

    qids = [f"Q{i:03d}" for i in range(config.num_queries)]
    for qid in qids:
        plant_query(qid, attempt=0)

    def materialize() -> tuple[Corpus, CandidateSet, list[str]]:
        doc_lines = []
        for i in range(config.num_docs):
            doc_lines.append(f"D{i:05d}\t{urls[i]}\t{' '.join(titles[i])}\t{' '.join(bodies[i])}\n")
        corpus = ingest_corpus(doc_lines)
        index = build_index(corpus)
        ql_cfg = QLConfig(mu=1250.0)
        scorer = lambda q, d: ql_score(q, d, index, ql_cfg)
        cands = CandidateSet("ql")
        for qid in qids:
            ranked = rank(scorer, query_tokens[qid], index, run_id="ql", query_id=qid)
            cands.set_query(qid, ranked.ranking(qid)[:config.candidate_depth], presorted=True)
        return corpus, cands, doc_lines

    corpus, candidates, doc_lines = materialize()
    for attempt in range(1, config.max_retries + 1):
        bad = []
        for qid in qids:
            top = candidates.doc_ids(qid)
            rel = qrels.relevant(qid)
            has_rel = any(d in rel for d in top)
            has_nonrel = any(d not in rel for d in top)
            if not (has_rel and has_nonrel):
                bad.append(qid)
        if not bad:
            break
        for qid in bad:
            unplant_query(qid)
            plant_query(qid, attempt)
        corpus, candidates, doc_lines = materialize()
    else:
        raise RuntimeError(f"queries without a usable candidate mix after {config.max_retries} retries")

    queries = {qid: Query(qid, list(query_tokens[qid])) for qid in qids}
    query_lines = [f"{qid}\t{' '.join(query_tokens[qid])}\n" for qid in qids]
    return SynthData(corpus, queries, qrels, candidates, markers, doc_lines, query_lines)
