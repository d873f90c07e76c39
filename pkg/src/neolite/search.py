"""Value-guided best-first plan search with an anytime cutoff.

Evaluators take a list of plans of one query and return one score per plan
(lower is better).  Single-plan functions can be adapted with :func:`batched`.
"""
from __future__ import annotations

import heapq
import itertools
import math
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .expert import scan_table, subset_dp
from .qpcore import Join, PlanForest, Query, children, is_complete
from .simdb import (Catalog, ConfigError, LatencyModel, join_key, join_local_cost, set_cardinality,
                    simulate_latency)

Evaluator = Callable[[Sequence[PlanForest]], Sequence[float]]


@dataclass
class SearchConfig:
    """Either budget may be ``None``; with both ``None`` the search runs until the heap is empty."""

    cutoff_ms: float | None = 250.0
    max_expansions: int | None = None
    allow_cross_products: bool = False
    # Stop once the heap minimum cannot beat the best complete plan.  Returns
    # exactly what running the heap dry would when child scores never drop
    # below their parent's (true for best-completion evaluators).
    stop_when_dominated: bool = False

    def __post_init__(self):
        for name in ("cutoff_ms", "max_expansions"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ConfigError(f"search {name} must be positive")

    @classmethod
    def expansions(cls, n: int | None, allow_cross_products: bool = False, **kw) -> "SearchConfig":
        return cls(cutoff_ms=None, max_expansions=n, allow_cross_products=allow_cross_products, **kw)


@dataclass
class SearchResult:
    plan: PlanForest
    score: float
    expansions: int
    hurried: bool


def batched(fn: Callable[[PlanForest], float]) -> Evaluator:
    return lambda plans: [fn(p) for p in plans]


def _kids(plan, query, catalog, cfg):
    return children(plan, query, cfg.allow_cross_products, catalog.indexed)


def _argmin_first(scores) -> int:
    # np.argmin returns the first minimum, i.e. the earliest generated child
    return int(np.argmin(np.asarray(scores, dtype=float)))


def hurry_up(evaluator: Evaluator, start: PlanForest, query: Query, catalog: Catalog,
             cfg: SearchConfig | None = None) -> PlanForest:
    """Greedy descent: always move to the lowest-scoring child."""
    cfg = cfg or SearchConfig()
    plan = start
    while not is_complete(plan, query):
        kids = _kids(plan, query, catalog, cfg)
        plan = kids[_argmin_first(evaluator(kids))]
    return plan


def search(evaluator: Evaluator, query: Query, catalog: Catalog, cfg: SearchConfig | None = None) -> SearchResult:
    cfg = cfg or SearchConfig()
    t0 = time.perf_counter()
    counter = itertools.count()
    p0 = PlanForest.initial(query)
    heap = [(float(evaluator([p0])[0]), next(counter), p0)]
    visited: set[str] = set()
    best: tuple[float, int, PlanForest] | None = None
    last = p0
    expansions = 0

    def out_of_budget():
        if cfg.max_expansions is not None and expansions >= cfg.max_expansions:
            return True
        return cfg.cutoff_ms is not None and (time.perf_counter() - t0) * 1e3 >= cfg.cutoff_ms

    while heap and not out_of_budget():
        if cfg.stop_when_dominated and best is not None and heap[0][0] >= best[0]:
            break
        _, _, plan = heapq.heappop(heap)
        if plan.key in visited:
            continue
        visited.add(plan.key)
        if is_complete(plan, query):
            continue
        last = plan
        kids = [k for k in _kids(plan, query, catalog, cfg) if k.key not in visited]
        expansions += 1
        if not kids:
            continue
        for k, s in zip(kids, evaluator(kids)):
            entry = (float(s), next(counter), k)
            heapq.heappush(heap, entry)
            if is_complete(k, query) and (best is None or entry[0] < best[0]):
                best = entry
    if best is not None:
        return SearchResult(best[2], best[0], expansions, False)
    plan = hurry_up(evaluator, last, query, catalog, cfg)
    return SearchResult(plan, float(evaluator([plan])[0]), expansions, True)


def best_first_search(evaluator: Evaluator, query: Query, catalog: Catalog,
                      cfg: SearchConfig | None = None) -> PlanForest:
    return search(evaluator, query, catalog, cfg).plan


class BruteForceCompletion:
    """Score = cheapest simulated latency over all completions of the plan.

    Memoized recursion over :func:`children`; only practical for tiny queries.
    """

    def __init__(self, query: Query, catalog: Catalog, model: LatencyModel | None = None,
                 allow_cross_products: bool = False):
        self.query, self.catalog = query, catalog
        self.model = model or LatencyModel()
        self.cfg = SearchConfig(allow_cross_products=allow_cross_products)
        self.memo: dict[str, float] = {}

    def value(self, plan: PlanForest) -> float:
        v = self.memo.get(plan.key)
        if v is None:
            if is_complete(plan, self.query):
                v = simulate_latency(self.catalog, plan, self.query, self.model)
            else:
                v = min(self.value(k) for k in _kids(plan, self.query, self.catalog, self.cfg))
            self.memo[plan.key] = v
        return v

    def __call__(self, plans: Sequence[PlanForest]) -> list[float]:
        return [self.value(p) for p in plans]


class BestCompletion:
    """Same scores as :class:`BruteForceCompletion`, computed by a DP.

    Each root's unspecified scans are resolved into a per-output-order cost
    table, then the roots are combined by the expert's subset DP fed true
    cardinalities.
    """

    def __init__(self, query: Query, catalog: Catalog, model: LatencyModel | None = None,
                 allow_cross_products: bool = False):
        self.query, self.catalog = query, catalog
        self.model = model or LatencyModel()
        if self.model.sigma:
            raise ConfigError("best-completion scores need a noise-free latency model")
        self.allow_cross_products = allow_cross_products
        self.card = lambda rels: set_cardinality(catalog, query, rels)
        self.tables: dict[str, dict] = {}
        self.memo: dict[str, float] = {}

    def _table(self, node) -> dict:
        tab = self.tables.get(node.key)
        if tab is not None:
            return tab
        if not node.is_join:
            kinds = ("table", "index") if node.kind == "unspec" else (node.kind,)
            tab = scan_table(self.catalog, self.query, self.model, self.card, node.rel, kinds)
        else:
            tab = {}
            lt, rt = self._table(node.left), self._table(node.right)
            lrows, rrows, out = self.card(node.left.rels), self.card(node.right.rels), self.card(node.rels)
            for lord, (lc, ln) in lt.items():
                for rord, (rc, rn) in rt.items():
                    j = Join(node.op, ln, rn)
                    key = join_key(self.query, j) if node.op == "merge" else None
                    cost = lc + rc + join_local_cost(self.model, node.op, lrows, rrows, out,
                                                     key is not None and lord == key,
                                                     key is not None and rord == key)
                    cur = tab.get(key)
                    if cur is None or (cost, j.key) < (cur[0], cur[1].key):
                        tab[key] = (cost, j)
        self.tables[node.key] = tab
        return tab

    def value(self, plan: PlanForest) -> float:
        v = self.memo.get(plan.key)
        if v is None:
            bases = [(t.rels, self._table(t)) for t in plan.roots]
            final = subset_dp(self.query, self.model, self.card, bases, self.allow_cross_products) \
                if len(bases) > 1 else bases[0][1]
            v = self.memo[plan.key] = min((c for c, _ in final.values()), default=math.inf)
        return v

    def __call__(self, plans: Sequence[PlanForest]) -> list[float]:
        return [self.value(p) for p in plans]
