"""Multi-field Duet ranker.

One unshared Duet instance per document field (exact-match "local" path plus
embedding "distributed" path) emits a field vector; field vectors are
concatenated and reduced to a relevance score by a dense head.  Training uses
pairwise logistic loss over (query, positive, negative) triples, structured
dropout of local paths and whole fields, and optional pseudo-query
pretraining from URLs/titles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .corpus import CandidateSet, Corpus, Document, Qrels, Query
from .embed import EmbeddingPair


@dataclass
class DuetMFConfig:
    max_query_terms: int = 20
    max_url_terms: int = 20
    max_title_terms: int = 20
    max_body_terms: int = 2000
    hidden: int = 300
    dropout_rate: float = 0.5
    local_dropout_prob: float = 0.5
    fields: tuple[str, ...] = ("url", "title", "body")
    kernel_width: int = 3
    seed: int = 0

    def __post_init__(self):
        self.fields = tuple(self.fields)
        for name in ("max_query_terms", "max_url_terms", "max_title_terms", "max_body_terms", "hidden", "kernel_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("dropout_rate", "local_dropout_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if not self.fields:
            raise ValueError("need at least one field")

    def field_cap(self, field_name: str) -> int:
        caps = {"url": self.max_url_terms, "title": self.max_title_terms, "body": self.max_body_terms}
        return caps.get(field_name, self.max_body_terms)

    def to_dict(self) -> dict:
        return {
            "max_query_terms": self.max_query_terms,
            "max_url_terms": self.max_url_terms,
            "max_title_terms": self.max_title_terms,
            "max_body_terms": self.max_body_terms,
            "hidden": self.hidden,
            "dropout_rate": self.dropout_rate,
            "local_dropout_prob": self.local_dropout_prob,
            "fields": list(self.fields),
            "kernel_width": self.kernel_width,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DuetMFConfig":
        d = dict(d)
        d["fields"] = tuple(d.get("fields", ("url", "title", "body")))
        return cls(**d)


@dataclass
class StructuredMask:
    """Training-time deactivation of local paths and whole field models."""

    local_on: dict[str, bool]
    active_fields: tuple[str, ...]

    def __post_init__(self):
        self.active_fields = tuple(self.active_fields)
        if not self.active_fields:
            raise ValueError("a structured mask must keep at least one field active")


def full_mask(config: DuetMFConfig) -> StructuredMask:
    return StructuredMask({f: True for f in config.fields}, config.fields)


def sample_structured_mask(config: DuetMFConfig, rng: np.random.Generator) -> StructuredMask:
    """Independent Bernoulli local dropout, then a uniform non-empty field subset."""
    local_on = {f: bool(rng.random() >= config.local_dropout_prob) for f in config.fields}
    n = len(config.fields)
    bits = int(rng.integers(1, 2 ** n))
    active = tuple(f for i, f in enumerate(config.fields) if bits >> i & 1)
    return StructuredMask(local_on, active)


def exact_match_matrix(query_tokens: list[str], field_tokens: list[str], max_q: int, max_f: int) -> np.ndarray:
    """Binary match pattern, zero-padded to (max_q, max_f)."""
    m = np.zeros((max_q, max_f))
    for i, q in enumerate(query_tokens[:max_q]):
        for j, t in enumerate(field_tokens[:max_f]):
            if q == t:
                m[i, j] = 1.0
    return m


@dataclass
class Triple:
    query_tokens: list[str]
    pos: Document
    neg: Document
    mask: StructuredMask | None = None
    query_id: str = ""

    def __post_init__(self):
        if self.pos.doc_id == self.neg.doc_id:
            raise ValueError("positive and negative must differ")


class DuetMFModel:
    """Per-field Duet instances plus the aggregation head over a frozen embedding table."""

    def __init__(self, config: DuetMFConfig, token_ids: dict[str, int], embedding_table: np.ndarray):
        if embedding_table.ndim != 2:
            raise ValueError("embedding table must be 2-d")
        self.config = config
        self.token_ids = token_ids
        self.embedding = T.Tensor(embedding_table, requires_grad=False)
        self.emb_dim = embedding_table.shape[1]
        self.params: dict[str, T.Tensor] = {}
        self._init_params()

    @classmethod
    def from_embeddings(cls, config: DuetMFConfig, embeddings: EmbeddingPair) -> "DuetMFModel":
        table = np.vstack([np.zeros((1, embeddings.dim)), embeddings.matrix_in])
        token_ids = {t: i + 1 for t, i in embeddings.vocab.items()}
        return cls(config, token_ids, table)

    # -- parameters -----------------------------------------------------------

    def _glorot(self, rng, shape, fan_in, fan_out) -> np.ndarray:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape)

    def _init_params(self) -> None:
        rng = np.random.default_rng(self.config.seed)
        h = self.config.hidden
        w = self.config.kernel_width
        q = self.config.max_query_terms
        d = self.emb_dim

        def param(name, shape, fan_in, fan_out):
            self.params[name] = T.Tensor(self._glorot(rng, shape, fan_in, fan_out), requires_grad=True)

        def zeros(name, shape):
            self.params[name] = T.Tensor(np.zeros(shape), requires_grad=True)

        for f in self.config.fields:
            param(f"{f}.local.conv", (w, q, h), w * q, h)
            param(f"{f}.local.w1", (h, h), h, h)
            zeros(f"{f}.local.b1", (h,))
            param(f"{f}.local.w2", (h, h), h, h)
            zeros(f"{f}.local.b2", (h,))
            param(f"{f}.dist.conv_q", (w, d, h), w * d, h)
            param(f"{f}.dist.conv_f", (w, d, h), w * d, h)
            param(f"{f}.dist.w1", (h, h), h, h)
            zeros(f"{f}.dist.b1", (h,))
            param(f"{f}.dist.w2", (h, h), h, h)
            zeros(f"{f}.dist.b2", (h,))
        n_fields = len(self.config.fields)
        param("head.w1", (n_fields * h, h), n_fields * h, h)
        zeros("head.b1", (h,))
        param("head.w2", (h, 1), h, 1)
        zeros("head.b2", (1,))

    def parameters(self) -> list[tuple[str, T.Tensor]]:
        return list(self.params.items())

    def zero_grads(self) -> None:
        for _, p in self.parameters():
            p.zero_grad()

    # -- encoding -------------------------------------------------------------

    def encode(self, tokens: list[str], cap: int) -> np.ndarray:
        """Token ids truncated and zero-padded to cap; 0 is the PAD/OOV row."""
        ids = np.zeros(cap, dtype=np.intp)
        for i, tok in enumerate(tokens[:cap]):
            ids[i] = self.token_ids.get(tok, 0)
        return ids

    # -- forward --------------------------------------------------------------

    def _maybe_dropout(self, tape, x, train, rng):
        rate = self.config.dropout_rate
        if not train or rate <= 0.0:
            return x
        mask = T.make_dropout_mask(rng, x.data.shape, rate)
        return T.dropout(tape, x, rate, mask)

    def _path_tail(self, tape, vec, prefix, train, rng):
        p = self.params
        out = T.relu(tape, T.dense(tape, vec, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
        out = self._maybe_dropout(tape, out, train, rng)
        return T.dense(tape, out, p[f"{prefix}.w2"], p[f"{prefix}.b2"])

    def field_forward(self, tape, query_tokens, field_tokens, field_name, local_on, train=False, rng=None):
        """One field's Duet: local (exact-match) and distributed (embedding) paths summed."""
        cfg = self.config
        p = self.params
        cap = cfg.field_cap(field_name)

        f_ids = self.encode(field_tokens, cap)
        q_ids = self.encode(query_tokens, cfg.max_query_terms)
        q_emb = T.embedding_lookup(tape, self.embedding, q_ids)
        f_emb = T.embedding_lookup(tape, self.embedding, f_ids)
        q_rep = T.global_max_pool(tape, T.relu(tape, T.conv1d(tape, q_emb, p[f"{field_name}.dist.conv_q"])))
        f_rep = T.global_max_pool(tape, T.relu(tape, T.conv1d(tape, f_emb, p[f"{field_name}.dist.conv_f"])))
        mixed = T.hadamard(tape, q_rep, f_rep)
        dist_vec = self._path_tail(tape, mixed, f"{field_name}.dist", train, rng)

        if not local_on:
            return dist_vec

        match = exact_match_matrix(query_tokens, field_tokens, cfg.max_query_terms, cap)
        m = T.Tensor(match.T)  # (cap, max_q): convolve along field positions
        local = T.global_max_pool(tape, T.relu(tape, T.conv1d(tape, m, p[f"{field_name}.local.conv"])))
        local_vec = self._path_tail(tape, local, f"{field_name}.local", train, rng)
        return T.add(tape, local_vec, dist_vec)

    def forward(self, tape, query_tokens, doc: Document, mask: StructuredMask | None = None,
                train: bool = False, rng: np.random.Generator | None = None) -> T.Tensor:
        """Score tensor of shape (1,).  Inactive fields contribute zero vectors."""
        cfg = self.config
        if mask is None:
            mask = full_mask(cfg)
        if train and cfg.dropout_rate > 0.0 and rng is None:
            raise ValueError("train-mode forward needs an rng for dropout masks")
        active = set(mask.active_fields)
        vecs = []
        for f in cfg.fields:
            if f in active:
                local_on = mask.local_on.get(f, True) if train else True
                vecs.append(self.field_forward(tape, query_tokens, doc.tokens(f), f, local_on, train, rng))
            else:
                vecs.append(T.Tensor(np.zeros(cfg.hidden)))
        joint = T.concat(tape, vecs)
        hid = T.relu(tape, T.dense(tape, joint, self.params["head.w1"], self.params["head.b1"]))
        return T.dense(tape, hid, self.params["head.w2"], self.params["head.b2"])

    def score(self, query_tokens: list[str], doc: Document) -> float:
        """Inference-mode score: all fields active, local paths on, no dropout."""
        return self.forward(None, query_tokens, doc).item()

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        terms = sorted(self.token_ids, key=self.token_ids.get)
        tensors = {"embedding": self.embedding.data}
        tensors.update({name: p.data for name, p in self.parameters()})
        T.save_tensors(path, tensors, meta={"kind": "duetmf", "config": self.config.to_dict(), "vocab": terms})

    @classmethod
    def load(cls, path) -> "DuetMFModel":
        tensors, meta = T.load_tensors(path)
        if meta.get("kind") != "duetmf":
            raise T.CheckpointError(f"{path} is not a DuetMF checkpoint")
        config = DuetMFConfig.from_dict(meta["config"])
        token_ids = {t: i + 1 for i, t in enumerate(meta["vocab"])}
        model = cls(config, token_ids, tensors["embedding"])
        for name, p in model.parameters():
            if name not in tensors:
                raise T.CheckpointError(f"checkpoint missing parameter {name}")
            if tensors[name].shape != p.data.shape:
                raise T.CheckpointError(f"parameter {name} shape {tensors[name].shape} != {p.data.shape}")
            p.data = tensors[name]
        return model


# -- training data -------------------------------------------------------------

def sample_negative(candidate_doc_ids: list[str], qrels: Qrels, query_id: str,
                    rng: np.random.Generator, top: int = 100) -> str:
    """Uniform draw from the top candidates that are not positively labeled."""
    if not candidate_doc_ids:
        raise ValueError("empty candidate list")
    pool = [d for d in candidate_doc_ids[:top] if qrels.grade(query_id, d) == 0]
    if not pool:
        raise ValueError(f"query {query_id!r}: all candidates are positively labeled")
    return pool[int(rng.integers(len(pool)))]


def build_triples(queries: dict[str, Query], candidates: CandidateSet, qrels: Qrels,
                  corpus: Corpus, rng: np.random.Generator, top: int = 100) -> list[Triple]:
    """One triple per positively-labeled candidate, fresh uniform negatives.

    Queries whose candidates are all positive (or all negative) are skipped.
    """
    triples: list[Triple] = []
    for qid, query in queries.items():
        doc_ids = candidates.doc_ids(qid)[:top]
        positives = [d for d in doc_ids if qrels.grade(qid, d) >= 1]
        if not positives or len(positives) == len(doc_ids):
            continue
        for pos_id in positives:
            neg_id = sample_negative(doc_ids, qrels, qid, rng, top)
            triples.append(Triple(query.tokens, corpus.get(pos_id), corpus.get(neg_id), query_id=qid))
    return triples


def generate_pretrain_triple(corpus: Corpus, config: DuetMFConfig,
                             rng: np.random.Generator, max_retries: int = 20) -> Triple:
    """Pseudo-query triple: the URL or title of a random positive doc becomes the
    query, and that field is masked on the document side for both documents."""
    docs = list(corpus)
    if len(docs) < 2:
        raise ValueError("pretraining needs at least 2 documents")
    source_fields = [f for f in ("url", "title") if f in config.fields]
    if not source_fields:
        raise ValueError("pretraining needs a url or title field")
    for _ in range(max_retries):
        i, j = rng.choice(len(docs), size=2, replace=False)
        source = source_fields[int(rng.integers(len(source_fields)))] if len(source_fields) > 1 else source_fields[0]
        pos, neg = docs[int(i)], docs[int(j)]
        pseudo = pos.tokens(source)[:config.max_query_terms]
        if not pseudo:
            continue
        local_on = {f: bool(rng.random() >= config.local_dropout_prob) for f in config.fields}
        active = tuple(f for f in config.fields if f != source)
        return Triple(pseudo, pos, neg, mask=StructuredMask(local_on, active), query_id=f"pseudo:{source}:{pos.doc_id}")
    raise ValueError(f"could not draw a document with a non-empty pseudo-query field in {max_retries} tries")


# -- training -------------------------------------------------------------------

def train_duetmf(model: DuetMFModel, triples, lr: float = 0.0001, batch: int = 128,
                 epochs: int = 1, seed: int = 0) -> list[float]:
    """Pairwise training over triples; one Adam step per minibatch.

    `triples` is a list, or a callable (epoch, rng) -> list for streams that
    resample negatives each epoch.  The same structured mask is applied to the
    positive and the negative document of a triple.  Returns per-epoch mean loss.
    """
    rng = np.random.default_rng(seed)
    state = T.AdamState(lr=lr)
    names_params = model.parameters()
    params = [p for _, p in names_params]
    curve: list[float] = []

    for epoch in range(epochs):
        epoch_triples = list(triples(epoch, rng)) if callable(triples) else list(triples)
        if not epoch_triples:
            raise ValueError("no training triples")
        order = rng.permutation(len(epoch_triples))
        total_loss = 0.0
        done = 0
        while done < len(order):
            chunk = order[done:done + batch]
            model.zero_grads()
            batch_loss = 0.0
            for idx in chunk:
                triple = epoch_triples[idx]
                mask = triple.mask or sample_structured_mask(model.config, rng)
                tape = T.Tape()
                s_pos = model.forward(tape, triple.query_tokens, triple.pos, mask, train=True, rng=rng)
                s_neg = model.forward(tape, triple.query_tokens, triple.neg, mask, train=True, rng=rng)
                loss = T.mean(tape, T.ranknet_loss(tape, s_pos, s_neg))
                T.backward(tape, loss)
                batch_loss += loss.item()
            n = len(chunk)
            grads = [(p.grad / n if p.grad is not None else np.zeros_like(p.data)) for p in params]
            T.adam_step(params, grads, state)
            total_loss += batch_loss
            done += n
        curve.append(total_loss / len(order))
    model.zero_grads()
    return curve


def pairwise_accuracy(model: DuetMFModel, triples: list[Triple]) -> float:
    """Fraction of triples the frozen model orders correctly."""
    if not triples:
        raise ValueError("no triples")
    good = sum(1 for t in triples if model.score(t.query_tokens, t.pos) > model.score(t.query_tokens, t.neg))
    return good / len(triples)


# -- ensembles ------------------------------------------------------------------

def ensemble_score(models: list[DuetMFModel], query_tokens: list[str], doc: Document) -> float:
    """Arithmetic mean of inference scores."""
    if not models:
        raise ValueError("empty model list")
    return sum(m.score(query_tokens, doc) for m in models) / len(models)


def score_candidates(models: list[DuetMFModel], queries: dict[str, Query], candidates: CandidateSet,
                     corpus: Corpus, run_id: str = "duet") -> CandidateSet:
    """Rerank each query's candidates by (ensemble) model score."""
    out = CandidateSet(run_id)
    for qid in candidates.query_ids():
        query = queries[qid]
        scored = [(d, ensemble_score(models, query.tokens, corpus.get(d))) for d in candidates.doc_ids(qid)]
        out.set_query(qid, scored)
    return out
