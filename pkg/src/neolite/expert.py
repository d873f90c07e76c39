"""Selinger-style bootstrap optimizer over estimated cardinalities.

Estimates assume uniformity and independence within a relation and the
inclusion principle across join keys.  The dynamic program keeps, for each
relation subset, the cheapest plan per output sort order: the only physical
property the cost formulas react to is whether a merge-join input is already
ordered on its key, so this bookkeeping makes the DP exact.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

from .qpcore import JOIN_OPS, ContractError, Join, PlanForest, PlanNode, Query, Scan, is_complete
from .simdb import (Catalog, LatencyModel, histogram_selectivity, join_key, join_local_cost,
                    plan_cost, set_cardinality)


@dataclass
class EstimatedCost:
    value: float
    est_cardinalities: dict = field(default_factory=dict)  # node key -> estimated rows


def base_estimate(catalog: Catalog, query: Query, rel: str) -> float:
    rows = float(catalog.table(rel).row_count)
    for p in query.predicates_on(rel):
        rows *= histogram_selectivity(catalog, p)
    return max(1.0, rows)


def set_estimate(catalog: Catalog, query: Query, rels: frozenset) -> float:
    """Estimated rows of joining ``rels``.

    Defined on the relation set (each join edge divides once by the larger
    key distinct count), so the estimate does not depend on join order.
    """
    est = 1.0
    for r in sorted(rels):
        est *= base_estimate(catalog, query, r)
    for e in query.join_edges:
        if e.left_rel in rels and e.right_rel in rels:
            dl = catalog.histogram(e.left_rel, e.left_col).distinct
            dr = catalog.histogram(e.right_rel, e.right_col).distinct
            est /= max(dl, dr, 1)
    return max(1.0, est)


class _EstimateCache:
    def __init__(self, catalog, query):
        self.catalog, self.query, self.memo = catalog, query, {}

    def __call__(self, rels):
        v = self.memo.get(rels)
        if v is None:
            v = self.memo[rels] = set_estimate(self.catalog, self.query, rels)
        return v


def estimated_cardinality(catalog: Catalog, plan_node: PlanNode, query: Query) -> float:
    if plan_node.unspecified:
        raise ContractError("cardinality needs a subtree without unspecified scans")
    return set_estimate(catalog, query, plan_node.rels)


def estimate_cost(catalog: Catalog, plan: PlanForest, query: Query,
                  model: LatencyModel | None = None) -> EstimatedCost:
    model = model or LatencyModel()
    if not is_complete(plan, query):
        raise ContractError("estimate_cost needs a complete plan")
    card = _EstimateCache(catalog, query)
    cost, _, _ = plan_cost(catalog, plan.roots[0], query, model, card)
    return EstimatedCost(cost, {n.key: card(n.rels) for n in plan.nodes()})


def subset_dp(query: Query, model: LatencyModel, card, bases: list[tuple[frozenset, dict]],
              allow_cross_products: bool = False) -> dict:
    """Cheapest way to join ``bases`` into one tree, per output order.

    Each base is ``(relations, {order: (cost, node)})``; the result has the
    same shape for the union of all bases.  Every bushy shape, operator and
    orientation is considered; per-order tables keep the recursion exact.
    """
    m = len(bases)
    rels_of = {1 << i: b[0] for i, b in enumerate(bases)}
    best: dict[int, dict] = {1 << i: b[1] for i, b in enumerate(bases)}

    def offer(table, order, cost, node):
        cur = table.get(order)
        if cur is None or (cost, node.key) < (cur[0], cur[1].key):
            table[order] = (cost, node)

    def rels(mask):
        r = rels_of.get(mask)
        if r is None:
            low = mask & -mask
            r = rels_of[mask] = rels(low) | rels(mask ^ low)
        return r

    for size in range(2, m + 1):
        for combo in itertools.combinations(range(m), size):
            mask = sum(1 << i for i in combo)
            s = rels(mask)
            if not allow_cross_products and not query.is_connected(s):
                continue
            table: dict = {}
            out = card(s)
            sub = (mask - 1) & mask
            while sub:
                left, right = sub, mask ^ sub
                sub = (sub - 1) & mask
                if left not in best or right not in best:
                    continue
                lr, rr = rels(left), rels(right)
                if not allow_cross_products and not query.edges_between(lr, rr):
                    continue
                lrows, rrows = card(lr), card(rr)
                for lord, (lc, lnode) in best[left].items():
                    for rord, (rc, rnode) in best[right].items():
                        for op in JOIN_OPS:
                            node = Join(op, lnode, rnode)
                            key = join_key(query, node) if op == "merge" else None
                            local = join_local_cost(model, op, lrows, rrows, out,
                                                    key is not None and lord == key,
                                                    key is not None and rord == key)
                            offer(table, key, lc + rc + local, node)
            if table:
                best[mask] = table
    return best.get((1 << m) - 1, {})


def scan_table(catalog: Catalog, query: Query, model: LatencyModel, card, rel: str,
               kinds=("table", "index")) -> dict:
    table = {}
    for kind in kinds:
        if kind == "index" and rel not in catalog.indexed:
            continue
        node = Scan(rel, kind)
        cost, _, order = plan_cost(catalog, node, query, model, card)
        cur = table.get(order)
        if cur is None or (cost, node.key) < (cur[0], cur[1].key):
            table[order] = (cost, node)
    return table


def dp_optimize(query: Query, catalog: Catalog, model: LatencyModel, card,
                allow_cross_products: bool = False) -> tuple[float, PlanNode]:
    """Bushy DP over relation subsets; returns ``(cost, root)`` of the cheapest plan."""
    bases = [(frozenset((r,)), scan_table(catalog, query, model, card, r)) for r in query.relations]
    final = subset_dp(query, model, card, bases, allow_cross_products)
    if not final:
        raise ContractError(f"query {query.query_id} has no plan without cross products")
    return min(final.values(), key=lambda cn: (cn[0], cn[1].key))


def optimize(query: Query, catalog: Catalog, model: LatencyModel | None = None,
             allow_cross_products: bool = False) -> PlanForest:
    """The expert's plan: minimum estimated cost, ties broken by canonical key."""
    model = model or LatencyModel()
    _, root = dp_optimize(query, catalog, model, _EstimateCache(catalog, query), allow_cross_products)
    return PlanForest.of(query, root)


def optimal_plan(query: Query, catalog: Catalog, model: LatencyModel | None = None,
                 allow_cross_products: bool = False) -> PlanForest:
    """Plan with minimum noise-free simulated latency (the DP fed true cardinalities)."""
    model = model or LatencyModel()
    _, root = dp_optimize(query, catalog, model, lambda s: set_cardinality(catalog, query, s),
                          allow_cross_products)
    return PlanForest.of(query, root)
