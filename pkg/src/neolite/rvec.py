"""Row vectors: value embeddings learned from table rows treated as sentences.

Training is skip-gram with negative sampling.  For a (center, context) pair
with input vector ``u`` and output vectors ``v+`` (context) and ``v-_k``
(negatives drawn from the unigram^0.75 table) the loss is

    -log s(u.v+) - sum_k log s(-u.v-_k)

and one SGD step moves ``u`` by ``-lr * ((s(u.v+) - 1) v+ + sum_k s(u.v-_k) v-_k)``,
``v+`` by ``-lr * (s(u.v+) - 1) u`` and each ``v-_k`` by ``-lr * s(u.v-_k) u``.
Updates are applied in shuffled minibatches; the learning rate decays
linearly to ``lr * min_lr_frac``.
"""
from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .qpcore import PRED_OPS, ColumnPredicate
from .simdb import Catalog, ConfigError, like_range


def token(rel: str, col: str, value) -> str:
    return f"{rel}.{col}={value}"


def build_sentences(catalog: Catalog, denormalize: bool = False,
                    include_keys: bool = False) -> list[list[str]]:
    """One sentence per base row; with ``denormalize`` also one per FK-table row
    extended by the attribute tokens of every row it references."""
    def columns(t):
        return [c for c, _ in t.columns] if include_keys else t.attribute_columns

    row_tokens: dict[str, list[list[str]]] = {}
    for t in catalog.tables:
        cols = columns(t)
        data = np.stack([catalog.column(t.name, c) for c in cols], axis=1) if cols else \
            np.zeros((t.row_count, 0), dtype=np.int64)
        row_tokens[t.name] = [[token(t.name, c, int(v)) for c, v in zip(cols, row)] for row in data]
    sentences = [s for t in catalog.tables for s in row_tokens[t.name]]
    if denormalize:
        for t in catalog.tables:
            if not t.fk_edges:
                continue
            fk_vals = [(ref, catalog.column(t.name, fk)) for fk, ref in t.fk_edges]
            for i, own in enumerate(row_tokens[t.name]):
                s = list(own)
                for ref, vals in fk_vals:
                    s.extend(row_tokens[ref][int(vals[i])])
                sentences.append(s)
    return sentences


@dataclass
class SgnsParams:
    dim: int = 16
    window: int = 10
    negatives: int = 5
    epochs: int = 5
    lr: float = 0.025
    seed: int = 0
    batch: int = 256
    min_lr_frac: float = 1e-3
    # "sum" exports input + output vectors; "input" the input side only
    vectors: str = "sum"

    def __post_init__(self):
        for k in ("dim", "window", "negatives", "epochs", "batch"):
            if getattr(self, k) <= 0:
                raise ConfigError(f"SGNS {k} must be positive")
        if self.lr <= 0:
            raise ConfigError("SGNS learning rate must be positive")
        if self.vectors not in ("sum", "input"):
            raise ConfigError(f"unknown SGNS vector export {self.vectors!r}")


@dataclass
class EmbeddingModel:
    tokens: list[str]
    vectors: np.ndarray
    counts: np.ndarray
    loss_history: list[float] = field(default_factory=list)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vocab = {t: i for i, t in enumerate(self.tokens)}
        self._by_column: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        groups: dict[str, list[tuple[int, int]]] = {}
        for i, t in enumerate(self.tokens):
            col, _, val = t.rpartition("=")
            try:
                groups.setdefault(col, []).append((int(val), i))
            except ValueError:
                continue
        for col, items in groups.items():
            items.sort()
            self._by_column[col] = (np.array([v for v, _ in items]), np.array([i for _, i in items]))

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def vector(self, tok: str) -> np.ndarray:
        return self.vectors[self.vocab[tok]]

    def column_values(self, rel: str, col: str) -> tuple[np.ndarray, np.ndarray]:
        return self._by_column.get(f"{rel}.{col}", (np.zeros(0, int), np.zeros(0, int)))

    def cosine(self, a: str, b: str) -> float:
        x, y = self.vector(a), self.vector(b)
        return float(x @ y / (np.linalg.norm(x) * np.linalg.norm(y) + 1e-12))

    def to_json(self) -> dict:
        vec = np.ascontiguousarray(self.vectors, dtype="<f8")
        return {"tokens": self.tokens, "counts": self.counts.tolist(), "dim": self.dim,
                "vectors_b64": base64.b64encode(vec.tobytes()).decode(),
                "loss_history": self.loss_history, "params": self.params}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    @classmethod
    def from_json(cls, d: dict) -> "EmbeddingModel":
        vec = np.frombuffer(base64.b64decode(d["vectors_b64"]), dtype="<f8").reshape(-1, d["dim"]).copy()
        return cls(list(d["tokens"]), vec, np.asarray(d["counts"], np.int64),
                   list(d.get("loss_history", [])), d.get("params", {}))


def _pairs(sentences: list[list[int]], window: int) -> tuple[np.ndarray, np.ndarray]:
    centers, contexts = [], []
    for s in sentences:
        n = len(s)
        if n < 2:
            continue
        arr = np.asarray(s)
        i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        keep = (i != j) & (np.abs(i - j) <= window)
        centers.append(arr[i[keep]])
        contexts.append(arr[j[keep]])
    if not centers:
        return np.zeros(0, int), np.zeros(0, int)
    return np.concatenate(centers), np.concatenate(contexts)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def train_embeddings(sentences: list[list[str]], params: SgnsParams | None = None) -> EmbeddingModel:
    params = params or SgnsParams()
    if not sentences or not any(sentences):
        raise ConfigError("cannot train embeddings on an empty corpus")
    rng = np.random.default_rng(params.seed)
    tokens = sorted({t for s in sentences for t in s})
    vocab = {t: i for i, t in enumerate(tokens)}
    ids = [[vocab[t] for t in s] for s in sentences]
    counts = np.bincount(np.concatenate([np.asarray(s, dtype=np.int64) for s in ids if s]),
                         minlength=len(tokens))
    centers, contexts = _pairs(ids, params.window)
    V, D, K = len(tokens), params.dim, params.negatives
    w_in = rng.uniform(-0.5 / D, 0.5 / D, size=(V, D))
    w_out = np.zeros((V, D))
    noise = counts ** 0.75
    noise = noise / noise.sum()
    noise_cdf = np.cumsum(noise)
    history = []
    n_pairs = len(centers)
    total_steps = max(1, params.epochs * -(-n_pairs // params.batch))
    step = 0
    for _ in range(params.epochs):
        order = rng.permutation(n_pairs)
        losses = []
        for lo in range(0, n_pairs, params.batch):
            b = order[lo:lo + params.batch]
            c, o = centers[b], contexts[b]
            neg = np.minimum(np.searchsorted(noise_cdf, rng.random((len(b), K))), V - 1)
            lr = params.lr * max(params.min_lr_frac, 1.0 - step / total_steps)
            step += 1
            u, vp, vn = w_in[c], w_out[o], w_out[neg]
            sp = _sigmoid(np.einsum("bd,bd->b", u, vp))
            sn = _sigmoid(np.einsum("bkd,bd->bk", vn, u))
            losses.append(float(-(np.log(sp + 1e-12).sum() + np.log(1 - sn + 1e-12).sum()) / len(b)))
            gp = sp - 1.0
            du = gp[:, None] * vp + np.einsum("bk,bkd->bd", sn, vn)
            np.add.at(w_out, o, -lr * gp[:, None] * u)
            np.add.at(w_out, neg.ravel(), -lr * (sn[:, :, None] * u[:, None, :]).reshape(-1, D))
            np.add.at(w_in, c, -lr * du)
        history.append(float(np.mean(losses)) if losses else 0.0)
    # values of different columns that co-occur are each other's context but
    # need not share contexts, so their input vectors alone can be unrelated;
    # adding the output side brings in the direct co-occurrence terms
    vectors = w_in + w_out if params.vectors == "sum" else w_in
    return EmbeddingModel(tokens, vectors, counts.astype(np.int64), history, asdict(params))


def embedding_width(model: EmbeddingModel) -> int:
    return len(PRED_OPS) + 2 + model.dim + 1


def embed_predicate(model: EmbeddingModel, predicate: ColumnPredicate, domain: int | None = None) -> np.ndarray:
    """Operator one-hot | matched-token count, matched fraction | mean embedding | occurrence count.

    ``in`` averages every literal found in the vocabulary; ``like`` averages
    every vocabulary value of the column inside the prefix range; ``lt``/``gt``
    use the in-vocabulary value nearest the literal.
    """
    out = np.zeros(embedding_width(model))
    out[PRED_OPS.index(predicate.op)] = 1.0
    values, idx = model.column_values(predicate.relation, predicate.column)
    matched: list[int] = []
    requested = 1
    if predicate.op in ("eq", "neq", "in"):
        lits = sorted(set(predicate.values), key=str)
        requested = len(lits)
        for v in lits:
            i = model.vocab.get(token(predicate.relation, predicate.column, v))
            if i is not None:
                matched.append(i)
    elif predicate.op in ("lt", "gt"):
        if len(values):
            j = int(np.argmin(np.abs(values - float(predicate.values[0]))))
            matched.append(int(idx[j]))
    else:
        if domain is None:
            domain = int(values.max()) + 1 if len(values) else 1
        lo, hi = like_range(predicate.values[0], domain)
        sel = (values >= lo) & (values < hi)
        matched.extend(int(i) for i in idx[sel])
    base = len(PRED_OPS)
    if matched:
        out[base] = len(matched)
        out[base + 1] = min(1.0, len(matched) / requested)
        out[base + 2:base + 2 + model.dim] = model.vectors[matched].mean(axis=0)
        out[-1] = float(model.counts[matched].sum())
    return out
