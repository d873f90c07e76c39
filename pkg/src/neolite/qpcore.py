"""Queries, partial plans and the plan grammar.

A partial plan is a forest of join/scan trees.  Leaves are scans over one
relation (table, index or not-yet-decided); internal nodes are binary joins
with an ordered (left, right) pair of inputs.  All objects are immutable and
hash/compare by their serialized key.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence, Union

JOIN_OPS = ("hash", "merge", "loop")
SCAN_KINDS = ("table", "index", "unspec")
PRED_OPS = ("eq", "neq", "lt", "gt", "in", "like")

_OP_CODE = {"hash": "H", "merge": "M", "loop": "L"}
_CODE_OP = {v: k for k, v in _OP_CODE.items()}
_SCAN_CODE = {"table": "T", "index": "I", "unspec": "U"}
_CODE_SCAN = {v: k for k, v in _SCAN_CODE.items()}
_RESERVED = set("(),|:")


class ContractError(ValueError):
    """An operation was called outside its precondition."""


@dataclass(frozen=True)
class ColumnPredicate:
    relation: str
    column: str
    op: str
    values: tuple

    def __post_init__(self):
        if self.op not in PRED_OPS:
            raise ContractError(f"unknown predicate operator {self.op!r}")
        object.__setattr__(self, "values", tuple(self.values))
        if not self.values:
            raise ContractError("predicate needs at least one literal")
        if self.op != "in" and len(self.values) != 1:
            raise ContractError(f"{self.op} takes exactly one literal")

    def to_json(self) -> dict:
        return {"rel": self.relation, "col": self.column, "op": self.op,
                "values": list(self.values)}

    @classmethod
    def from_json(cls, d: dict) -> "ColumnPredicate":
        return cls(d["rel"], d["col"], d["op"], tuple(d["values"]))


@dataclass(frozen=True)
class JoinEdge:
    """Equi-join ``left_rel.left_col = right_rel.right_col``; endpoints sorted."""

    left_rel: str
    left_col: str
    right_rel: str
    right_col: str

    @classmethod
    def make(cls, rel_a, col_a, rel_b, col_b) -> "JoinEdge":
        if (rel_a, col_a) > (rel_b, col_b):
            rel_a, col_a, rel_b, col_b = rel_b, col_b, rel_a, col_a
        return cls(rel_a, col_a, rel_b, col_b)

    @property
    def rels(self) -> tuple[str, str]:
        return (self.left_rel, self.right_rel)

    def column_for(self, rel: str) -> str:
        if rel == self.left_rel:
            return self.left_col
        if rel == self.right_rel:
            return self.right_col
        raise KeyError(rel)


@dataclass(frozen=True)
class Query:
    query_id: str
    relations: tuple[str, ...]
    join_edges: tuple[JoinEdge, ...] = ()
    predicates: tuple[ColumnPredicate, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "relations", tuple(self.relations))
        object.__setattr__(self, "join_edges", tuple(sorted(
            self.join_edges, key=lambda e: (e.left_rel, e.left_col, e.right_rel, e.right_col))))
        object.__setattr__(self, "predicates", tuple(self.predicates))
        rels = set(self.relations)
        if len(rels) != len(self.relations) or not rels:
            raise ContractError("relations must be non-empty and distinct")
        for r in rels:
            if _RESERVED & set(r):
                raise ContractError(f"relation id {r!r} uses a reserved character")
        for e in self.join_edges:
            if not set(e.rels) <= rels or e.left_rel == e.right_rel:
                raise ContractError(f"join edge {e} outside query relations")
        for p in self.predicates:
            if p.relation not in rels:
                raise ContractError(f"predicate on {p.relation} outside query relations")
        if not self.is_connected(rels):
            raise ContractError(f"join graph of {self.query_id} is not connected")

    def index_of(self, rel: str) -> int:
        return self.relations.index(rel)

    def edges_between(self, a: frozenset, b: frozenset) -> list[JoinEdge]:
        return [e for e in self.join_edges
                if (e.left_rel in a and e.right_rel in b) or (e.left_rel in b and e.right_rel in a)]

    def is_connected(self, rels: Iterable[str]) -> bool:
        rels = set(rels)
        if not rels:
            return True
        start = next(iter(rels))
        seen, stack = {start}, [start]
        while stack:
            r = stack.pop()
            for e in self.join_edges:
                if r in e.rels:
                    other = e.right_rel if r == e.left_rel else e.left_rel
                    if other in rels and other not in seen:
                        seen.add(other)
                        stack.append(other)
        return seen == rels

    def predicates_on(self, rel: str) -> list[ColumnPredicate]:
        return [p for p in self.predicates if p.relation == rel]

    def to_json(self) -> dict:
        return {
            "id": self.query_id,
            "relations": list(self.relations),
            "joins": [[e.left_rel, e.left_col, e.right_rel, e.right_col] for e in self.join_edges],
            "predicates": [p.to_json() for p in self.predicates],
        }

    @classmethod
    def from_json(cls, d: dict) -> "Query":
        return cls(
            d["id"], tuple(d["relations"]),
            tuple(JoinEdge.make(*j) for j in d.get("joins", ())),
            tuple(ColumnPredicate.from_json(p) for p in d.get("predicates", ())),
        )


# --------------------------------------------------------------------------
# plan nodes

@dataclass(frozen=True, eq=False)
class Scan:
    rel: str
    kind: str = "unspec"
    rels: frozenset = field(init=False, repr=False)
    key: str = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in SCAN_KINDS:
            raise ContractError(f"unknown scan kind {self.kind!r}")
        object.__setattr__(self, "rels", frozenset((self.rel,)))
        object.__setattr__(self, "key", f"{_SCAN_CODE[self.kind]}:{self.rel}")

    is_join = False
    size = 1

    @property
    def unspecified(self) -> int:
        return int(self.kind == "unspec")

    def __eq__(self, other):
        return isinstance(other, (Scan, Join)) and self.key == other.key

    def __hash__(self):
        return hash(self.key)

    def nodes(self) -> Iterator["PlanNode"]:
        yield self


@dataclass(frozen=True, eq=False)
class Join:
    op: str
    left: "PlanNode"
    right: "PlanNode"
    rels: frozenset = field(init=False, repr=False)
    key: str = field(init=False, repr=False)
    unspecified: int = field(init=False, repr=False)
    size: int = field(init=False, repr=False)

    is_join = True

    def __post_init__(self):
        if self.op not in JOIN_OPS:
            raise ContractError(f"unknown join operator {self.op!r}")
        if self.left.rels & self.right.rels:
            raise ContractError("join inputs share a relation")
        object.__setattr__(self, "rels", self.left.rels | self.right.rels)
        object.__setattr__(self, "key", f"{_OP_CODE[self.op]}({self.left.key},{self.right.key})")
        object.__setattr__(self, "unspecified", self.left.unspecified + self.right.unspecified)
        object.__setattr__(self, "size", 1 + self.left.size + self.right.size)

    def __eq__(self, other):
        return isinstance(other, (Scan, Join)) and self.key == other.key

    def __hash__(self):
        return hash(self.key)

    def nodes(self) -> Iterator["PlanNode"]:
        """Pre-order traversal."""
        yield self
        yield from self.left.nodes()
        yield from self.right.nodes()


PlanNode = Union[Scan, Join]


@dataclass(frozen=True, eq=False)
class PlanForest:
    """Partial (or complete) plan for one query.

    ``relations`` is the owning query's relation order; roots are kept sorted
    by the smallest relation index they contain.
    """

    query_id: str
    relations: tuple[str, ...]
    roots: tuple[PlanNode, ...]
    key: str = field(init=False, repr=False)

    def __post_init__(self):
        pos = {r: i for i, r in enumerate(self.relations)}
        roots = tuple(sorted(self.roots, key=lambda t: min(pos[r] for r in t.rels)))
        object.__setattr__(self, "roots", roots)
        object.__setattr__(self, "key", "|".join(t.key for t in roots))

    @classmethod
    def _presorted(cls, query_id: str, relations: tuple, roots: tuple) -> "PlanForest":
        # caller guarantees ``roots`` is already in canonical order
        obj = object.__new__(cls)
        object.__setattr__(obj, "query_id", query_id)
        object.__setattr__(obj, "relations", relations)
        object.__setattr__(obj, "roots", roots)
        object.__setattr__(obj, "key", "|".join(t.key for t in roots))
        return obj

    @classmethod
    def initial(cls, query: Query) -> "PlanForest":
        """The all-unspecified forest: one ``U(r)`` root per relation."""
        return cls(query.query_id, query.relations, tuple(Scan(r) for r in query.relations))

    @classmethod
    def of(cls, query: Query, *roots: PlanNode) -> "PlanForest":
        return cls(query.query_id, query.relations, tuple(roots))

    def __eq__(self, other):
        return isinstance(other, PlanForest) and self.query_id == other.query_id and self.key == other.key

    def __hash__(self):
        return hash((self.query_id, self.key))

    def __repr__(self):
        return f"PlanForest({self.query_id!r}, {self.key})"

    @property
    def unspecified(self) -> int:
        return sum(t.unspecified for t in self.roots)

    @property
    def open_decisions(self) -> int:
        return self.unspecified + len(self.roots) - 1

    def nodes(self) -> Iterator[PlanNode]:
        for t in self.roots:
            yield from t.nodes()

    def to_json(self) -> dict:
        return {"query_id": self.query_id, "roots": [node_to_json(t) for t in self.roots]}


def _check_owner(plan: PlanForest, query: Query) -> None:
    if plan.query_id != query.query_id:
        raise ContractError(f"plan belongs to {plan.query_id!r}, not {query.query_id!r}")


def is_complete(plan: PlanForest, query: Query | None = None) -> bool:
    if query is not None:
        _check_owner(plan, query)
    return len(plan.roots) == 1 and plan.roots[0].unspecified == 0


def _specializations(node: PlanNode, indexed) -> Iterator[tuple[PlanNode, ...]]:
    """Yield copies of ``node`` with exactly one U leaf specialized."""
    if not node.unspecified:
        return
    if not node.is_join:
        yield Scan(node.rel, "table")
        if indexed is None or node.rel in indexed:
            yield Scan(node.rel, "index")
        return
    for sub in _specializations(node.left, indexed):
        yield Join(node.op, sub, node.right)
    for sub in _specializations(node.right, indexed):
        yield Join(node.op, node.left, sub)


def children(plan: PlanForest, query: Query, allow_cross_products: bool = False,
             indexed=None) -> list[PlanForest]:
    """All plans one action away from ``plan``.

    Actions are (a) turning one ``U(r)`` into ``T(r)`` or, when ``r`` is in
    ``indexed`` (``None`` means every relation), ``I(r)``; (b) joining two
    roots with any operator in either orientation.  Without cross products two
    roots may only be joined when a query join edge connects them.
    """
    _check_owner(plan, query)
    roots = plan.roots
    out = []
    qid, rels = plan.query_id, plan.relations
    make = PlanForest._presorted
    for i, t in enumerate(roots):
        for spec in _specializations(t, indexed):
            out.append(make(qid, rels, roots[:i] + (spec,) + roots[i + 1:]))
    for i in range(len(roots)):
        for j in range(i + 1, len(roots)):
            a, b = roots[i], roots[j]
            if not allow_cross_products and not query.edges_between(a.rels, b.rels):
                continue
            # roots are ordered by smallest relation index, so the merged
            # tree takes slot i and the remaining order is unchanged
            head, mid, tail = roots[:i], roots[i + 1:j], roots[j + 1:]
            for op in JOIN_OPS:
                out.append(make(qid, rels, head + (Join(op, a, b),) + mid + tail))
                out.append(make(qid, rels, head + (Join(op, b, a),) + mid + tail))
    return out


def _matches(small: PlanNode, big: PlanNode) -> bool:
    if not small.is_join:
        if big.is_join or big.rel != small.rel:
            return False
        return small.kind == big.kind or (small.kind == "unspec" and big.kind != "unspec")
    return (big.is_join and small.op == big.op
            and _matches(small.left, big.left) and _matches(small.right, big.right))


def _subtree_index(plan: PlanForest) -> dict:
    return {n.rels: n for n in plan.nodes()}


def is_subplan(p_i: PlanForest, p_j: PlanForest, _index: dict | None = None) -> bool:
    """True iff ``p_j`` can be built from ``p_i`` by specializing scans and joining roots."""
    if p_i.query_id != p_j.query_id:
        raise ContractError("plans belong to different queries")
    index = _index if _index is not None else _subtree_index(p_j)
    for t in p_i.roots:
        # Each relation occurs once, so the candidate subtree is fixed by its leaf set.
        cand = index.get(t.rels)
        if cand is None or not _matches(t, cand):
            return False
    return True


class SubplanIndex:
    """Pre-indexed ``p_j`` for repeated ``is_subplan(·, p_j)`` checks."""

    def __init__(self, plan: PlanForest):
        self.plan = plan
        self._index = _subtree_index(plan)

    def contains(self, p_i: PlanForest) -> bool:
        return is_subplan(p_i, self.plan, self._index)


def canonical_key(plan: PlanForest) -> str:
    return plan.key


def parse_node(text: str) -> PlanNode:
    pos = 0

    def node():
        nonlocal pos
        code = text[pos]
        if text[pos + 1] == ":":
            end = pos + 2
            while end < len(text) and text[end] not in "(),|":
                end += 1
            rel = text[pos + 2:end]
            pos = end
            return Scan(rel, _CODE_SCAN[code])
        if text[pos + 1] != "(":
            raise ValueError(f"bad plan key at {pos}: {text!r}")
        pos += 2
        left = node()
        if text[pos] != ",":
            raise ValueError(f"bad plan key at {pos}: {text!r}")
        pos += 1
        right = node()
        if text[pos] != ")":
            raise ValueError(f"bad plan key at {pos}: {text!r}")
        pos += 1
        return Join(_CODE_OP[code], left, right)

    out = node()
    if pos != len(text):
        raise ValueError(f"trailing input in plan key {text!r}")
    return out


def parse_key(key: str, query: Query) -> PlanForest:
    return PlanForest.of(query, *(parse_node(part) for part in key.split("|")))


def construction_states(complete_plan: PlanForest, query: Query | None = None) -> list[PlanForest]:
    """The 2n forests on the canonical path from all-unspecified to ``complete_plan``.

    Scans are specified first in relation order, then joins are applied in
    post-order (bottom-up, left-to-right) of the final tree.
    """
    if not is_complete(complete_plan, query):
        raise ContractError("construction_states needs a complete plan")
    root = complete_plan.roots[0]
    qid, rels = complete_plan.query_id, complete_plan.relations
    kinds = {n.rel: n.kind for n in root.nodes() if not n.is_join}
    leaves = {r: Scan(r, "unspec") for r in rels}
    states = [PlanForest(qid, rels, tuple(leaves.values()))]
    for r in rels:
        leaves[r] = Scan(r, kinds[r])
        states.append(PlanForest(qid, rels, tuple(leaves.values())))

    current = {frozenset((r,)): leaves[r] for r in rels}
    post = []

    def walk(n):
        if n.is_join:
            walk(n.left)
            walk(n.right)
            post.append(n)

    walk(root)
    for j in post:
        del current[j.left.rels], current[j.right.rels]
        current[j.rels] = j
        states.append(PlanForest(qid, rels, tuple(current.values())))
    return states


# --------------------------------------------------------------------------
# JSON

def node_to_json(node: PlanNode) -> dict:
    if node.is_join:
        return {"join": node.op, "l": node_to_json(node.left), "r": node_to_json(node.right)}
    return {"scan": node.kind, "rel": node.rel}


def node_from_json(d: dict) -> PlanNode:
    if "join" in d:
        return Join(d["join"], node_from_json(d["l"]), node_from_json(d["r"]))
    return Scan(d["rel"], d["scan"])


def plan_from_json(d: dict, query: Query) -> PlanForest:
    if d.get("query_id", query.query_id) != query.query_id:
        raise ContractError("plan JSON belongs to another query")
    return PlanForest.of(query, *(node_from_json(t) for t in d["roots"]))


def plan_dumps(plan: PlanForest) -> str:
    return json.dumps(plan.to_json(), sort_keys=True)


def complete_plans(query: Query, indexed=None, allow_cross_products: bool = False) -> list[PlanForest]:
    """Every complete plan of ``query`` by direct recursive construction.

    Independent of :func:`children`; used as the exhaustive-enumeration oracle.
    """
    memo: dict[frozenset, list[PlanNode]] = {}

    def build(rels: frozenset) -> list[PlanNode]:
        if rels in memo:
            return memo[rels]
        if len(rels) == 1:
            (r,) = rels
            out = [Scan(r, "table")]
            if indexed is None or r in indexed:
                out.append(Scan(r, "index"))
            memo[rels] = out
            return out
        items = sorted(rels)
        out = []
        n = len(items)
        for mask in range(1, 2 ** n - 1):
            left = frozenset(items[k] for k in range(n) if mask >> k & 1)
            right = rels - left
            if not allow_cross_products and (not query.is_connected(left) or not query.is_connected(right)
                                             or not query.edges_between(left, right)):
                continue
            for lt in build(left):
                for rt in build(right):
                    for op in JOIN_OPS:
                        out.append(Join(op, lt, rt))
        memo[rels] = out
        return out

    return [PlanForest.of(query, t) for t in build(frozenset(query.relations))]


def left_deep(query: Query, order: Sequence[str], ops: Sequence[str], scans: Sequence[str]) -> PlanForest:
    """Convenience constructor: ``((s0 op0 s1) op1 s2) ...``."""
    node = Scan(order[0], scans[0])
    for rel, op, kind in zip(order[1:], ops, scans[1:]):
        node = Join(op, node, Scan(rel, kind))
    return PlanForest.of(query, node)
