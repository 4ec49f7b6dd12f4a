"""Dual (center/context) word embeddings: skip-gram training and DESM scoring.

The trainer produces both matrices because the OUTx* similarity variants need
context vectors, which public pretrained files usually omit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

DESM_VARIANTS = ("INxIN", "INxOUT", "OUTxIN", "OUTxOUT")


class EmbeddingError(ValueError):
    """Bad embedding input: empty stream, malformed vector file."""


@dataclass
class SkipGramConfig:
    dim: int = 300
    window: int = 5
    negatives: int = 5
    epochs: int = 5
    lr: float = 0.025
    min_count: int = 1
    seed: int = 0

    def __post_init__(self):
        for name in ("dim", "window", "negatives", "min_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


class EmbeddingPair:
    """Vocabulary with parallel center (IN) and context (OUT) matrices."""

    def __init__(self, vocab: dict[str, int], matrix_in: np.ndarray, matrix_out: np.ndarray):
        if matrix_in.shape != matrix_out.shape:
            raise EmbeddingError(f"IN shape {matrix_in.shape} != OUT shape {matrix_out.shape}")
        if len(vocab) != matrix_in.shape[0]:
            raise EmbeddingError(f"vocab size {len(vocab)} != matrix rows {matrix_in.shape[0]}")
        self.vocab = vocab
        self.matrix_in = matrix_in
        self.matrix_out = matrix_out

    @property
    def dim(self) -> int:
        return self.matrix_in.shape[1]

    def __contains__(self, term: str) -> bool:
        return term in self.vocab

    def matrix(self, tag: str) -> np.ndarray:
        tag = tag.upper()
        if tag == "IN":
            return self.matrix_in
        if tag == "OUT":
            return self.matrix_out
        raise ValueError(f"unknown matrix tag {tag!r}")

    @classmethod
    def random_init(cls, vocab: dict[str, int], dim: int, seed: int) -> "EmbeddingPair":
        """Seeded uniform init in (-0.5/dim, 0.5/dim) for both matrices."""
        rng = np.random.default_rng(seed)
        m_in = (rng.random((len(vocab), dim)) - 0.5) / dim
        m_out = (rng.random((len(vocab), dim)) - 0.5) / dim
        return cls(vocab, m_in, m_out)


def build_vocab(sentences: list[list[str]], min_count: int = 1) -> tuple[dict[str, int], np.ndarray]:
    """Term -> row index (by descending count, term as tiebreak) and the count vector."""
    counts: dict[str, int] = {}
    for sent in sentences:
        for tok in sent:
            counts[tok] = counts.get(tok, 0) + 1
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    vocab = {t: i for i, t in enumerate(kept)}
    return vocab, np.array([counts[t] for t in kept], dtype=np.float64)


def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    # -log(1 + exp(-x)) computed stably
    return np.where(x >= 0, -np.log1p(np.exp(-np.abs(x))), x - np.log1p(np.exp(-np.abs(x))))


def train_skipgram(sentences, config: SkipGramConfig = SkipGramConfig()) -> tuple[EmbeddingPair, list[float]]:
    """Skip-gram with negative sampling; single worker, deterministic under seed.

    Negatives are drawn from the unigram distribution raised to 0.75.  Returns
    the trained pair and the mean per-pair loss of each epoch.
    """
    sentences = [list(s) for s in sentences]
    if not any(sentences):
        raise EmbeddingError("empty token stream")
    vocab, counts = build_vocab(sentences, config.min_count)
    if not vocab:
        raise EmbeddingError("no term reaches min_count")

    pair = EmbeddingPair.random_init(vocab, config.dim, config.seed)
    rng = np.random.default_rng(config.seed + 1)

    noise = counts ** 0.75
    cumulative = np.cumsum(noise / noise.sum())
    id_sentences = [[vocab[t] for t in s if t in vocab] for s in sentences]
    m_in, m_out = pair.matrix_in, pair.matrix_out
    lr, k = config.lr, config.negatives

    epoch_losses: list[float] = []
    for _ in range(config.epochs):
        total_loss = 0.0
        total_pairs = 0
        for ids in id_sentences:
            n = len(ids)
            for i, center in enumerate(ids):
                radius = int(rng.integers(1, config.window + 1))
                ctx = ids[max(0, i - radius):i] + ids[i + 1:i + radius + 1]
                if not ctx:
                    continue
                ctx = np.asarray(ctx, dtype=np.intp)
                c = len(ctx)
                neg = np.searchsorted(cumulative, rng.random((c, k))).astype(np.intp)
                valid = neg != ctx[:, None]          # word2vec skips negatives equal to the context

                v = m_in[center]
                u_ctx = m_out[ctx]                  # (c, D)
                u_neg = m_out[neg]                  # (c, k, D)
                pos_logit = u_ctx @ v               # (c,)
                neg_logit = u_neg @ v               # (c, k)

                total_loss -= float(np.sum(_log_sigmoid(pos_logit)))
                total_loss -= float(np.sum(_log_sigmoid(-neg_logit) * valid))
                total_pairs += c

                pos_coeff = _sigmoid(pos_logit) - 1.0            # (c,)
                neg_coeff = _sigmoid(neg_logit) * valid          # (c, k)

                dv = pos_coeff @ u_ctx + np.einsum("ck,ckd->d", neg_coeff, u_neg)
                m_in[center] -= lr * dv
                np.add.at(m_out, ctx, -lr * pos_coeff[:, None] * v)
                np.add.at(m_out, neg.reshape(-1), -lr * (neg_coeff.reshape(-1, 1) * v))
        epoch_losses.append(total_loss / total_pairs if total_pairs else 0.0)
    return pair, epoch_losses


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- text persistence ----------------------------------------------------------

def _write_matrix(path, vocab: dict[str, int], matrix: np.ndarray) -> None:
    terms = sorted(vocab, key=vocab.get)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{matrix.shape[0]} {matrix.shape[1]}\n")
        for term, row in zip(terms, matrix):
            fh.write(term + " " + " ".join(f"{v:.9g}" for v in row) + "\n")


def _read_matrix(path) -> tuple[list[str], np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise EmbeddingError(f"{path}: malformed header {header!r}")
        try:
            count, dim = int(header[0]), int(header[1])
        except ValueError as exc:
            raise EmbeddingError(f"{path}: malformed header {header!r}") from exc
        terms = []
        rows = []
        for line in fh:
            parts = line.rstrip("\n").split(" ")
            if len(parts) != dim + 1:
                raise EmbeddingError(f"{path}: term {parts[0]!r} has {len(parts) - 1} values, expected {dim}")
            terms.append(parts[0])
            rows.append([float(v) for v in parts[1:]])
        if len(terms) != count:
            raise EmbeddingError(f"{path}: header promises {count} rows, found {len(terms)}")
    return terms, np.asarray(rows, dtype=np.float64).reshape(len(terms), dim)


def save_embeddings(pair: EmbeddingPair, base_path) -> None:
    """Write `<base>.in.vec` and `<base>.out.vec` text files (header `count dim`)."""
    _write_matrix(f"{base_path}.in.vec", pair.vocab, pair.matrix_in)
    _write_matrix(f"{base_path}.out.vec", pair.vocab, pair.matrix_out)


def load_embeddings(base_path) -> EmbeddingPair:
    terms_in, m_in = _read_matrix(f"{base_path}.in.vec")
    terms_out, m_out = _read_matrix(f"{base_path}.out.vec")
    if terms_in != terms_out:
        raise EmbeddingError("IN and OUT files disagree on the vocabulary")
    if m_in.shape != m_out.shape:
        raise EmbeddingError(f"IN shape {m_in.shape} != OUT shape {m_out.shape}")
    return EmbeddingPair({t: i for i, t in enumerate(terms_in)}, m_in, m_out)


# -- DESM ----------------------------------------------------------------------

class DesmResult(NamedTuple):
    score: float
    degenerate: bool


def desm_score(query_tokens: list[str], field_tokens: list[str], pair: EmbeddingPair, variant: str = "INxOUT") -> DesmResult:
    """Mean cosine between query vectors and the normalized document centroid.

    The first variant tag picks the query-side matrix, the second the
    document side.  Out-of-vocabulary terms are skipped; if either side ends
    up empty the result is (0.0, degenerate=True).
    """
    tag = variant.upper()
    if tag not in {v.upper() for v in DESM_VARIANTS}:
        raise ValueError(f"unknown DESM variant {variant!r}")
    q_tag, d_tag = tag.split("X")
    q_matrix = pair.matrix(q_tag)
    d_matrix = pair.matrix(d_tag)

    doc_vecs = []
    for tok in field_tokens:
        idx = pair.vocab.get(tok)
        if idx is None:
            continue
        vec = d_matrix[idx]
        norm = float(np.linalg.norm(vec))
        if norm > 0.0:
            doc_vecs.append(vec / norm)
    if not doc_vecs:
        return DesmResult(0.0, True)
    centroid = np.mean(doc_vecs, axis=0)
    c_norm = float(np.linalg.norm(centroid))
    if c_norm == 0.0:
        return DesmResult(0.0, True)
    centroid = centroid / c_norm

    total = 0.0
    used = 0
    for tok in query_tokens:
        idx = pair.vocab.get(tok)
        if idx is None:
            continue
        vec = q_matrix[idx]
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            continue
        total += float(vec @ centroid) / norm
        used += 1
    if used == 0:
        return DesmResult(0.0, True)
    return DesmResult(total / used, False)
