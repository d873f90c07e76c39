"""Query-level and plan-level encodings.

Query vector = upper-triangular join-graph bits over all catalog relations,
followed by one predicate slot per catalog column.  Plan nodes are
``|J| + 2|R|`` wide: a join-operator one-hot, then a (table, index) bit pair per
relation.  An unspecified scan sets both bits; a join's pair block is the OR
of its children's.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .qpcore import JOIN_OPS, PlanForest, Query
from .rvec import EmbeddingModel, embed_predicate, embedding_width
from .simdb import Catalog, ConfigError, histogram_selectivity

VARIANTS = ("one-hot", "histogram", "r-vector")


@dataclass
class PlanVecTree:
    """A flattened vector forest: pre-order rows per tree, trees in root order."""

    vectors: np.ndarray  # (nodes, width)
    left: np.ndarray     # child row or -1
    right: np.ndarray
    roots: np.ndarray

    def __len__(self):
        return len(self.vectors)

    def to_json(self) -> dict:
        return {"vectors": self.vectors.tolist(), "left": self.left.tolist(),
                "right": self.right.tolist(), "roots": self.roots.tolist()}


def slot_width(variant: str, embeddings: EmbeddingModel | None = None) -> int:
    if variant == "r-vector":
        if embeddings is None:
            raise ConfigError("the r-vector encoding needs trained embeddings")
        return embedding_width(embeddings)
    if variant not in VARIANTS:
        raise ConfigError(f"unknown featurization {variant!r}")
    return 1


def encode_query(query: Query, catalog: Catalog, variant: str = "histogram",
                 embeddings: EmbeddingModel | None = None) -> np.ndarray:
    width = slot_width(variant, embeddings)
    rels = catalog.relation_names
    pos = {r: i for i, r in enumerate(rels)}
    n = len(rels)
    join_bits = np.zeros(n * (n - 1) // 2)
    for e in query.join_edges:
        i, j = sorted((pos[e.left_rel], pos[e.right_rel]))
        join_bits[i * n - i * (i + 1) // 2 + (j - i - 1)] = 1.0
    cols = catalog.all_columns
    cpos = {c: k for k, c in enumerate(cols)}
    block = np.zeros((len(cols), width))
    grouped: dict[int, list] = {}
    for p in query.predicates:
        grouped.setdefault(cpos[(p.relation, p.column)], []).append(p)
    for k, preds in grouped.items():
        if variant == "one-hot":
            block[k, 0] = 1.0
        elif variant == "histogram":
            block[k, 0] = math.prod(histogram_selectivity(catalog, p) for p in preds)
        else:
            rel, col = cols[k]
            dom = catalog.table(rel).domain(col)
            vecs = [embed_predicate(embeddings, p, dom) for p in preds]
            v = np.mean(vecs, axis=0)
            v[-1] = math.log1p(v[-1])  # occurrence counts span orders of magnitude
            block[k] = v
    return np.concatenate([join_bits, block.ravel()])


def query_width(catalog: Catalog, variant: str, embeddings: EmbeddingModel | None = None) -> int:
    n = len(catalog.relation_names)
    return n * (n - 1) // 2 + len(catalog.all_columns) * slot_width(variant, embeddings)


def encode_plan(plan: PlanForest, relations: Catalog | Sequence[str],
                join_ops: Sequence[str] = JOIN_OPS) -> PlanVecTree:
    """Encode ``plan`` against a catalog (or an explicit relation order)."""
    if isinstance(relations, Catalog):
        relations = relations.relation_names
    nj = len(join_ops)
    op_pos = {op: i for i, op in enumerate(join_ops)}
    rel_pos = {r: i for i, r in enumerate(relations)}
    width = nj + 2 * len(relations)
    rows_r, cols_r = [], []
    left, right, roots = [], [], []
    ancestors: list[int] = []

    def visit(node) -> int:
        me = len(left)
        left.append(-1)
        right.append(-1)
        if node.is_join:
            if node.op not in op_pos:
                raise ConfigError(f"join operator {node.op!r} not in the encoding")
            rows_r.append(me)
            cols_r.append(op_pos[node.op])
            ancestors.append(me)
            left[me] = visit(node.left)
            right[me] = visit(node.right)
            ancestors.pop()
        else:
            base = nj + 2 * rel_pos[node.rel]
            bits = (base,) if node.kind == "table" else (base + 1,) if node.kind == "index" else (base, base + 1)
            for row in (me, *ancestors):
                for b in bits:
                    rows_r.append(row)
                    cols_r.append(b)
        return me

    for t in plan.roots:
        roots.append(visit(t))
    vectors = np.zeros((len(left), width))
    vectors[rows_r, cols_r] = 1.0
    return PlanVecTree(vectors, np.asarray(left, dtype=np.int64), np.asarray(right, dtype=np.int64),
                       np.asarray(roots, dtype=np.int64))


class Featurizer:
    """Encodings bound to one catalog and variant, with a per-query cache."""

    def __init__(self, catalog: Catalog, variant: str = "histogram",
                 embeddings: EmbeddingModel | None = None, join_ops: Sequence[str] = JOIN_OPS):
        slot_width(variant, embeddings)
        self.catalog = catalog
        self.variant = variant
        self.embeddings = embeddings
        self.join_ops = tuple(join_ops)
        self.relations = tuple(catalog.relation_names)
        self.query_width = query_width(catalog, variant, embeddings)
        self.node_width = len(self.join_ops) + 2 * len(self.relations)
        self._qcache: dict[Query, np.ndarray] = {}

    def query(self, query: Query) -> np.ndarray:
        v = self._qcache.get(query)
        if v is None:
            v = self._qcache[query] = encode_query(query, self.catalog, self.variant, self.embeddings)
        return v

    def plan(self, plan: PlanForest) -> PlanVecTree:
        return encode_plan(plan, self.relations, self.join_ops)
