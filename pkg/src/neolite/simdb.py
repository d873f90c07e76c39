"""Synthetic database: catalog and workload generation, cardinality oracle, latency model.

Every table has an integer ``id`` key column in ``[0, rows)``; foreign keys
reference a dimension's ``id``.  Attribute columns hold integer codes in
``[0, domain)``.  ``like`` predicates interpret a code as its zero-padded
decimal rendering, so a prefix selects one contiguous code range.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np

from .qpcore import (ColumnPredicate, ContractError, JoinEdge, PlanForest, PlanNode,
                     Query, is_complete)


class ConfigError(ValueError):
    """Invalid generator or model configuration."""


class CatalogError(KeyError):
    """Reference to a table or column the catalog does not have."""


# --------------------------------------------------------------------------
# configuration

@dataclass
class TableSpec:
    name: str
    rows: int
    attrs: dict[str, int] = field(default_factory=dict)  # column -> domain size
    fks: dict[str, str] = field(default_factory=dict)     # column -> referenced table
    indexed: bool = True
    index_column: str = "id"
    skew: float = 0.0  # zipf-like exponent for choosing FK targets
    popularity: dict[str, str] = field(default_factory=dict)  # fk column -> attribute of the referenced
    # table ranking target popularity (code 0 most popular); without an entry the ranking is random
    value_skew: float = 0.0  # zipf exponent of free attribute marginals (code 0 most frequent)


@dataclass
class CorrelationSpec:
    """``a`` and ``b`` ("table.column") share a skewed joint distribution.

    Supported placements: both columns in one table; ``a`` in a table holding
    a foreign key to ``b``'s table; or both in tables referenced by one fact
    table (the correlation is then realised through the fact rows).
    """

    a: str
    b: str
    strength: float = 0.8


@dataclass
class SchemaConfig:
    tables: list[TableSpec]
    correlations: list[CorrelationSpec] = field(default_factory=list)
    buckets: int = 32

    @classmethod
    def from_json(cls, d: dict) -> "SchemaConfig":
        return cls([TableSpec(**t) for t in d["tables"]],
                   [CorrelationSpec(**c) for c in d.get("correlations", [])],
                   d.get("buckets", 32))

    def to_json(self) -> dict:
        return asdict(self)


def imdb_like_schema(scale: float = 1.0, strength: float = 0.9, skew: float = 1.2,
                     value_skew: float = 0.0) -> SchemaConfig:
    """Seven-table snowflake modelled loosely on the movie database.

    Title genre is strongly tied to keyword topic (through movie_keyword), to
    person country (through cast_info) and to title kind (same table).  Fact
    rows favour titles of low genre codes, so fan-out depends on genre too.
    """
    def n(x):
        return max(2, int(round(x * scale)))

    tables = [
        TableSpec("title", n(1500), {"kind": 12, "genre": 12, "year": 40}),
        TableSpec("keyword", n(300), {"topic": 12}),
        TableSpec("person", n(1000), {"gender": 2, "country": 12}),
        TableSpec("company", n(200), {"country": 16, "ctype": 4}),
        TableSpec("movie_keyword", n(6000), {"weight": 5}, {"movie_id": "title", "keyword_id": "keyword"},
                  index_column="movie_id", skew=skew, popularity={"movie_id": "genre"}),
        TableSpec("cast_info", n(8000), {"role": 8}, {"movie_id": "title", "person_id": "person"},
                  index_column="movie_id", skew=skew, popularity={"movie_id": "genre"}),
        TableSpec("movie_companies", n(3000), {"note": 10}, {"movie_id": "title", "company_id": "company"},
                  index_column="movie_id", skew=skew, popularity={"movie_id": "genre"}),
    ]
    for t in tables:
        t.value_skew = value_skew
    corr = [
        CorrelationSpec("title.kind", "title.genre", strength),
        CorrelationSpec("title.genre", "keyword.topic", strength),
        CorrelationSpec("title.genre", "person.country", strength),
    ]
    return SchemaConfig(tables, corr)


@dataclass
class WorkloadConfig:
    queries: int = 50
    joins: tuple[int, int] = (2, 6)
    predicates: tuple[int, int] = (1, 4)
    op_weights: dict[str, float] = field(default_factory=lambda: {
        "eq": 0.45, "in": 0.2, "lt": 0.1, "gt": 0.1, "neq": 0.05, "like": 0.1})
    correlated_bias: float = 0.7  # chance a predicate lands on a correlated column when available
    anchored: float = 0.8  # chance a query draws its literals from one joined row
    templates: int = 0  # >0: queries cycle through this many (join graph, predicate columns) shapes

    @classmethod
    def from_json(cls, d: dict) -> "WorkloadConfig":
        d = dict(d)
        for k in ("joins", "predicates"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def to_json(self) -> dict:
        d = asdict(self)
        d["joins"], d["predicates"] = list(self.joins), list(self.predicates)
        return d


# --------------------------------------------------------------------------
# catalog

@dataclass
class TableDef:
    name: str
    columns: list[tuple[str, int]]  # (name, domain size); "id" first
    fk_edges: list[tuple[str, str]]
    row_count: int
    index_column: str = "id"

    def column_index(self, col: str) -> int:
        for i, (c, _) in enumerate(self.columns):
            if c == col:
                return i
        raise CatalogError(f"{self.name}.{col}")

    def domain(self, col: str) -> int:
        return self.columns[self.column_index(col)][1]

    @property
    def attribute_columns(self) -> list[str]:
        keys = {"id"} | {c for c, _ in self.fk_edges}
        return [c for c, _ in self.columns if c not in keys]


@dataclass
class Histogram:
    """Equi-width histogram over integer codes; bucket ``i`` covers ``[edges[i], edges[i+1])``."""

    edges: np.ndarray
    counts: np.ndarray
    rows: int
    domain: int
    distinct: int

    @cached_property
    def _ceil_edges(self) -> np.ndarray:
        return np.ceil(self.edges - 1e-9)

    def ints_in(self, b: int) -> int:
        ce = self._ceil_edges
        return int(ce[b + 1] - ce[b])

    def bucket_of(self, v: float) -> int:
        return int(np.searchsorted(self.edges, v, side="right") - 1)

    def frac_below(self, v: float) -> float:
        """Estimated fraction of rows with value < v (integer codes, uniform within bucket)."""
        e = self.edges
        if v <= e[0]:
            return 0.0
        if v >= e[-1]:
            return 1.0
        b = self.bucket_of(v)
        full = self.counts[:b].sum()
        ints = self.ints_in(b)
        part = 0.0
        if ints > 0:
            below = max(0.0, math.ceil(v - 1e-9) - self._ceil_edges[b])
            part = self.counts[b] * min(1.0, below / ints)
        return float((full + part) / self.rows)

    def eq(self, v) -> float:
        if v < self.edges[0] or v >= self.edges[-1] or v != int(v):
            return 0.0
        b = self.bucket_of(v)
        ints = self.ints_in(b)
        if ints <= 0:
            return 0.0
        return float(self.counts[b] / self.rows / ints)

    def to_json(self) -> dict:
        return {"edges": self.edges.tolist(), "counts": self.counts.tolist(), "rows": self.rows,
                "domain": self.domain, "distinct": self.distinct}

    @classmethod
    def from_json(cls, d: dict) -> "Histogram":
        return cls(np.asarray(d["edges"], float), np.asarray(d["counts"], np.int64),
                   int(d["rows"]), int(d["domain"]), int(d["distinct"]))


def build_histogram(values: np.ndarray, domain: int, buckets: int) -> Histogram:
    lo, hi = 0, max(domain, int(values.max()) + 1 if len(values) else 1)
    edges = np.linspace(lo, hi, buckets + 1)
    counts, _ = np.histogram(values, bins=edges)
    return Histogram(edges, counts.astype(np.int64), len(values), domain, int(len(np.unique(values))))


class Catalog:
    """Generated tables, statistics and index flags.  Treat as immutable."""

    def __init__(self, tables: list[TableDef], rows: dict[str, np.ndarray],
                 histograms: dict[tuple[str, str], Histogram], index_flags: dict[str, bool],
                 correlation_spec: list[CorrelationSpec], seed: int):
        self.tables = tables
        self.rows = rows
        self.histograms = histograms
        self.index_flags = index_flags
        self.correlation_spec = correlation_spec
        self.seed = seed
        self._by_name = {t.name: t for t in tables}
        self._mask_cache: dict = {}
        self._card_cache: dict = {}

    # -- structure -------------------------------------------------------
    @property
    def relation_names(self) -> list[str]:
        return [t.name for t in self.tables]

    def table(self, name: str) -> TableDef:
        try:
            return self._by_name[name]
        except KeyError:
            raise CatalogError(name) from None

    @cached_property
    def all_columns(self) -> list[tuple[str, str]]:
        return [(t.name, c) for t in self.tables for c, _ in t.columns]

    @cached_property
    def fk_graph(self) -> list[JoinEdge]:
        return [JoinEdge.make(t.name, col, ref, "id") for t in self.tables for col, ref in t.fk_edges]

    @cached_property
    def indexed(self) -> frozenset:
        return frozenset(r for r, f in self.index_flags.items() if f)

    def column(self, rel: str, col: str) -> np.ndarray:
        t = self.table(rel)
        return self.rows[rel][:, t.column_index(col)]

    def histogram(self, rel: str, col: str) -> Histogram:
        try:
            return self.histograms[(rel, col)]
        except KeyError:
            raise CatalogError(f"{rel}.{col}") from None

    # -- persistence -----------------------------------------------------
    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "tables": [{"name": t.name, "columns": [list(c) for c in t.columns],
                        "fk_edges": [list(e) for e in t.fk_edges], "row_count": t.row_count,
                        "index_column": t.index_column} for t in self.tables],
            "rows": {k: v.tolist() for k, v in self.rows.items()},
            "histograms": {f"{r}.{c}": h.to_json() for (r, c), h in self.histograms.items()},
            "index_flags": self.index_flags,
            "correlations": [asdict(c) for c in self.correlation_spec],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))

    @cached_property
    def content_hash(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    @classmethod
    def from_json(cls, d: dict) -> "Catalog":
        tables = [TableDef(t["name"], [tuple(c) for c in t["columns"]], [tuple(e) for e in t["fk_edges"]],
                           t["row_count"], t.get("index_column", "id")) for t in d["tables"]]
        rows = {k: np.asarray(v, dtype=np.int64).reshape(-1, len(cls._cols(tables, k)))
                for k, v in d["rows"].items()}
        hists = {tuple(k.split(".", 1)): Histogram.from_json(h) for k, h in d["histograms"].items()}
        return cls(tables, rows, hists, dict(d["index_flags"]),
                   [CorrelationSpec(**c) for c in d.get("correlations", [])], d["seed"])

    @staticmethod
    def _cols(tables, name):
        return next(t.columns for t in tables if t.name == name)

    # -- predicates ------------------------------------------------------
    def predicate_mask(self, pred: ColumnPredicate) -> np.ndarray:
        values = self.column(pred.relation, pred.column)
        domain = self.table(pred.relation).domain(pred.column)
        return evaluate_predicate(pred, values, domain)

    def relation_mask(self, query: Query, rel: str) -> np.ndarray | None:
        key = (query, rel)
        if key not in self._mask_cache:
            mask = None
            for p in query.predicates_on(rel):
                m = self.predicate_mask(p)
                mask = m if mask is None else mask & m
            self._mask_cache[key] = mask
        return self._mask_cache[key]


def like_range(prefix: str, domain: int) -> tuple[int, int]:
    """Code range ``[lo, hi)`` whose zero-padded rendering starts with ``prefix``."""
    width = len(str(max(domain - 1, 0)))
    prefix = str(prefix)
    if not prefix.isdigit() or len(prefix) > width:
        return (0, 0)
    scale = 10 ** (width - len(prefix))
    return int(prefix) * scale, (int(prefix) + 1) * scale


def evaluate_predicate(pred: ColumnPredicate, values: np.ndarray, domain: int) -> np.ndarray:
    v = pred.values
    if pred.op == "eq":
        return values == v[0]
    if pred.op == "neq":
        return values != v[0]
    if pred.op == "lt":
        return values < v[0]
    if pred.op == "gt":
        return values > v[0]
    if pred.op == "in":
        return np.isin(values, np.asarray(v))
    lo, hi = like_range(v[0], domain)
    return (values >= lo) & (values < hi)


def histogram_selectivity(catalog: Catalog, predicate: ColumnPredicate) -> float:
    h = catalog.histogram(predicate.relation, predicate.column)
    v = predicate.values
    op = predicate.op
    if op == "eq":
        s = h.eq(v[0])
    elif op == "neq":
        s = 1.0 - h.eq(v[0])
    elif op == "lt":
        s = h.frac_below(v[0])
    elif op == "gt":
        s = 1.0 - h.frac_below(math.floor(v[0]) + 1)
    elif op == "in":
        s = min(1.0, sum(h.eq(x) for x in set(v)))
    else:
        lo, hi = like_range(v[0], h.domain)
        s = h.frac_below(hi) - h.frac_below(lo) if hi > lo else 0.0
    return float(min(1.0, max(0.0, s)))


def cramers_v(x: np.ndarray, y: np.ndarray) -> float:
    xs, xi = np.unique(x, return_inverse=True)
    ys, yi = np.unique(y, return_inverse=True)
    if len(xs) < 2 or len(ys) < 2:
        return 0.0
    table = np.zeros((len(xs), len(ys)))
    np.add.at(table, (xi, yi), 1)
    n = table.sum()
    expected = table.sum(1, keepdims=True) * table.sum(0, keepdims=True) / n
    chi2 = ((table - expected) ** 2 / expected).sum()
    return float(math.sqrt(chi2 / n / (min(table.shape) - 1)))


def paired_columns(catalog: Catalog, a: str, b: str) -> tuple[np.ndarray, np.ndarray]:
    """Aligned value arrays for columns ``a`` and ``b`` along their FK path."""
    ra, ca = a.split(".")
    rb, cb = b.split(".")
    if ra == rb:
        return catalog.column(ra, ca), catalog.column(rb, cb)
    ta, tb = catalog.table(ra), catalog.table(rb)
    for fk, ref in ta.fk_edges:
        if ref == rb:
            return catalog.column(ra, ca), catalog.column(rb, cb)[catalog.column(ra, fk)]
    for fk, ref in tb.fk_edges:
        if ref == ra:
            return catalog.column(ra, ca)[catalog.column(rb, fk)], catalog.column(rb, cb)
    for f in catalog.tables:
        refs = dict((ref, fk) for fk, ref in f.fk_edges)
        if ra in refs and rb in refs:
            ia = catalog.column(f.name, refs[ra])
            ib = catalog.column(f.name, refs[rb])
            return catalog.column(ra, ca)[ia], catalog.column(rb, cb)[ib]
    raise ConfigError(f"no FK path of length <= 2 between {a} and {b}")


def _zipf_weights(n: int, s: float, rng: np.random.Generator) -> np.ndarray:
    if s <= 0:
        return np.full(n, 1.0 / n)
    w = 1.0 / np.arange(1, n + 1) ** s
    w = w[rng.permutation(n)]
    return w / w.sum()


def generate_catalog(config: SchemaConfig, seed: int) -> Catalog:
    rng = np.random.default_rng(seed)
    names = [t.name for t in config.tables]
    spec = {t.name: t for t in config.tables}
    if len(set(names)) != len(names):
        raise ConfigError("duplicate table names")
    for t in config.tables:
        if t.rows < 1:
            raise ConfigError(f"{t.name}: row count must be >= 1")
        if t.skew < 0 or t.value_skew < 0:
            raise ConfigError(f"{t.name}: skew exponents must be >= 0")
        for c, d in t.attrs.items():
            if d < 2:
                raise ConfigError(f"{t.name}.{c}: domain must be >= 2")
        for c, ref in t.fks.items():
            if ref not in spec:
                raise ConfigError(f"{t.name}.{c} references unknown table {ref}")
        if len(set(t.fks.values())) != len(t.fks):
            raise ConfigError(f"{t.name}: at most one foreign key per referenced table")
        for fk, attr in t.popularity.items():
            if fk not in t.fks or attr not in spec[t.fks[fk]].attrs:
                raise ConfigError(f"{t.name}: popularity of {fk} needs an attribute of the referenced table")
    _check_fk_forest(config.tables)

    for c in config.correlations:
        ra, ca = c.a.split(".")
        rb, cb = c.b.split(".")
        for r, col in ((ra, ca), (rb, cb)):
            if r not in spec or col not in spec[r].attrs:
                raise ConfigError(f"correlation on unknown attribute {r}.{col}")
        if spec[ra].attrs[ca] != spec[rb].attrs[cb]:
            raise ConfigError(f"correlated columns {c.a} and {c.b} need equal domain sizes")
        if not 0 <= c.strength <= 1:
            raise ConfigError("correlation strength must lie in [0, 1]")

    # generate dimension-like tables (no FKs) first, then tables with FKs
    order = sorted(names, key=lambda n: (len(spec[n].fks) > 0, names.index(n)))
    data: dict[str, dict[str, np.ndarray]] = {}
    for name in order:
        t = spec[name]
        cols: dict[str, np.ndarray] = {"id": np.arange(t.rows, dtype=np.int64)}
        for fk, ref in t.fks.items():
            cols[fk] = None
        for c in t.attrs:
            cols[c] = None
        data[name] = cols
        _fill_table(t, cols, data, config, spec, rng)

    tables, rows, hists = [], {}, {}
    for t in config.tables:
        columns = [("id", t.rows)] + [(fk, spec[ref].rows) for fk, ref in t.fks.items()] \
            + list(t.attrs.items())
        td = TableDef(t.name, columns, list(t.fks.items()), t.rows, t.index_column)
        td.column_index(t.index_column)
        tables.append(td)
        mat = np.stack([data[t.name][c] for c, _ in columns], axis=1).astype(np.int64)
        rows[t.name] = mat
        for i, (c, d) in enumerate(columns):
            hists[(t.name, c)] = build_histogram(mat[:, i], d, config.buckets)
    flags = {t.name: bool(t.indexed) for t in config.tables}
    return Catalog(tables, rows, hists, flags, list(config.correlations), seed)


def _check_fk_forest(tables: list[TableSpec]) -> None:
    parent = {t.name: t.name for t in tables}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for t in tables:
        for ref in t.fks.values():
            a, b = find(t.name), find(ref)
            if a == b:
                raise ConfigError("foreign-key graph must be acyclic")
            parent[a] = b


def _keep_probability(strength: float) -> float:
    # uniform replacements and skewed marginals pull V below the copy rate; copy
    # more often than asked so the generated V clears the configured strength
    return strength + 0.5 * (1.0 - strength) if strength > 0 else 0.0


def _mix_mapping(src: np.ndarray, domain: int, strength: float, rng) -> np.ndarray:
    """Return codes equal to ``src`` with boosted probability, else uniform."""
    p = _keep_probability(strength)
    keep = rng.random(len(src)) < p
    return np.where(keep, src, rng.integers(0, domain, len(src)))


def _fill_table(t: TableSpec, cols, data, config: SchemaConfig, spec, rng) -> None:
    n = t.rows
    corr = config.correlations
    # foreign keys: a correlation between two referenced dims steers the second FK
    fk_items = list(t.fks.items())
    for i, (fk, ref) in enumerate(fk_items):
        steer = None
        for c in corr:
            if c.strength <= 0:
                continue
            ra, ca = c.a.split(".")
            rb, cb = c.b.split(".")
            for (r1, c1), (r2, c2) in (((ra, ca), (rb, cb)), ((rb, cb), (ra, ca))):
                if r2 == ref and r1 != ref and r1 in dict((v, k) for k, v in fk_items[:i]).keys():
                    steer = (r1, c1, c2, c.strength)
        if fk in t.popularity:
            attr = data[ref][t.popularity[fk]]
            weights = 1.0 / (attr + 1.0) ** t.skew
            weights = weights / weights.sum()
        else:
            weights = _zipf_weights(spec[ref].rows, t.skew, rng)
        base = rng.choice(spec[ref].rows, size=n, p=weights)
        if steer is not None:
            r1, c1, c2, s = steer
            prev_fk = dict((v, k) for k, v in fk_items)[r1]
            src_vals = data[r1][c1][cols[prev_fk]]
            target_vals = data[ref][c2]
            groups = {v: np.flatnonzero(target_vals == v) for v in np.unique(target_vals)}
            p = _keep_probability(s)
            follow = rng.random(n) < p
            picks = base.copy()
            for j in np.flatnonzero(follow):
                g = groups.get(int(src_vals[j]))
                if g is not None and len(g):
                    picks[j] = g[rng.integers(len(g))]
            base = picks
        cols[fk] = base.astype(np.int64)
    # attributes
    for c, d in t.attrs.items():
        src = None
        for cs in corr:
            if cs.strength <= 0:
                continue
            ra, ca = cs.a.split(".")
            rb, cb = cs.b.split(".")
            for (r1, c1), (r2, c2) in (((ra, ca), (rb, cb)), ((rb, cb), (ra, ca))):
                if r2 != t.name or c2 != c:
                    continue
                if r1 == t.name and cols.get(c1) is not None:
                    src = (cols[c1], cs.strength)
                elif r1 in t.fks.values() and r1 in data and data[r1].get(c1) is not None:
                    fk = dict((v, k) for k, v in t.fks.items())[r1]
                    src = (data[r1][c1][cols[fk]], cs.strength)
        if src is None and t.value_skew > 0:
            w = 1.0 / np.arange(1, d + 1) ** t.value_skew
            cols[c] = rng.choice(d, size=n, p=w / w.sum()).astype(np.int64)
        elif src is None:
            cols[c] = rng.integers(0, d, n).astype(np.int64)
        else:
            cols[c] = _mix_mapping(src[0], d, src[1], rng).astype(np.int64)


# --------------------------------------------------------------------------
# workload

def generate_workload(catalog: Catalog, config: WorkloadConfig, seed: int,
                      prefix: str = "q") -> list[Query]:
    rng = np.random.default_rng(seed)
    names = catalog.relation_names
    edges = catalog.fk_graph
    adj: dict[str, list[JoinEdge]] = {r: [] for r in names}
    for e in edges:
        adj[e.left_rel].append(e)
        adj[e.right_rel].append(e)
    comp_max = _largest_component(names, edges)
    lo, hi = config.joins
    if lo < 0 or hi < lo:
        raise ConfigError("invalid join-count range")
    if hi > comp_max - 1:
        raise ConfigError(f"join count {hi} exceeds what the FK graph supports ({comp_max - 1})")
    plo, phi = config.predicates
    corr_cols = set()
    for c in catalog.correlation_spec:
        if c.strength > 0:
            corr_cols.add(tuple(c.a.split(".")))
            corr_cols.add(tuple(c.b.split(".")))
    ops = list(config.op_weights)
    opw = np.asarray([config.op_weights[o] for o in ops], float)
    opw /= opw.sum()

    def skeleton():
        k = int(rng.integers(lo, hi + 1))
        while True:
            start = names[int(rng.integers(len(names)))]
            chosen = [start]
            while len(chosen) < k + 1:
                frontier = sorted({(e.left_rel if e.right_rel in chosen else e.right_rel)
                                   for r in chosen for e in adj[r]} - set(chosen))
                if not frontier:
                    break
                chosen.append(frontier[int(rng.integers(len(frontier)))])
            if len(chosen) == k + 1:
                break
        rels = tuple(r for r in names if r in chosen)
        jedges = tuple(e for e in edges if e.left_rel in chosen and e.right_rel in chosen)
        cand = [(r, c) for r in rels for c in catalog.table(r).attribute_columns]
        npred = int(rng.integers(plo, phi + 1))
        slots = []
        used = set()
        for _ in range(min(npred, len(cand))):
            pool = [x for x in cand if x not in used]
            hot = [x for x in pool if x in corr_cols]
            if hot and rng.random() < config.correlated_bias:
                pool = hot
            rel, col = pool[int(rng.integers(len(pool)))]
            used.add((rel, col))
            slots.append((rel, col, ops[int(rng.choice(len(ops), p=opw))]))
        return rels, jedges, slots

    def instantiate(qid, rels, jedges, slots):
        anchor = _anchor_rows(catalog, rels, rng) if rng.random() < config.anchored else {}
        preds = tuple(_random_predicate(catalog, rel, col, op, rng, anchor.get(rel)) for rel, col, op in slots)
        return Query(qid, rels, jedges, preds)

    width = len(str(config.queries - 1))
    ids = [f"{prefix}{qi:0{width}d}" for qi in range(config.queries)]
    if config.templates:
        # like hand-written benchmarks: shared join graph and predicate columns, fresh literals
        shapes = [skeleton() for _ in range(config.templates)]
        return [instantiate(qid, *shapes[qi % config.templates]) for qi, qid in enumerate(ids)]
    return [instantiate(qid, *skeleton()) for qid in ids]


def _largest_component(names, edges) -> int:
    best = 0
    seen = set()
    for r in names:
        if r in seen:
            continue
        stack, comp = [r], {r}
        while stack:
            x = stack.pop()
            for e in edges:
                if x in e.rels:
                    y = e.right_rel if x == e.left_rel else e.left_rel
                    if y not in comp:
                        comp.add(y)
                        stack.append(y)
        seen |= comp
        best = max(best, len(comp))
    return best


def _anchor_rows(catalog: Catalog, rels: tuple, rng) -> dict[str, int]:
    """One row id per relation, consistent along FKs from a random fact row.

    Literals drawn from these rows describe data that actually co-occurs, as
    hand-written benchmark queries tend to.
    """
    facts = [r for r in rels if any(ref in rels for _, ref in catalog.table(r).fk_edges)]
    anchor: dict[str, int] = {}
    for f in facts:
        if f not in anchor:
            anchor[f] = int(rng.integers(catalog.table(f).row_count))
        for fk, ref in catalog.table(f).fk_edges:
            if ref in rels and ref not in anchor:
                anchor[ref] = int(catalog.column(f, fk)[anchor[f]])
    return anchor


def _random_predicate(catalog: Catalog, rel: str, col: str, op: str, rng,
                      row: int | None = None) -> ColumnPredicate:
    values = catalog.column(rel, col)
    domain = catalog.table(rel).domain(col)
    if row is None:
        row = int(rng.integers(len(values)))
    pick = int(values[row])
    if op == "in":
        k = int(rng.integers(2, 4))
        lits = sorted({pick} | {int(values[int(rng.integers(len(values)))]) for _ in range(k - 1)})
        return ColumnPredicate(rel, col, "in", tuple(lits))
    if op == "like":
        width = len(str(domain - 1))
        text = f"{pick:0{width}d}"
        plen = max(1, width - 1)
        return ColumnPredicate(rel, col, "like", (text[:plen],))
    if op in ("lt", "gt"):
        pick = max(1, min(domain - 2, pick)) if domain > 2 else pick
    return ColumnPredicate(rel, col, op, (pick,))


def workload_to_json(queries: list[Query]) -> list[dict]:
    return [q.to_json() for q in queries]


def workload_from_json(d: list[dict]) -> list[Query]:
    return [Query.from_json(q) for q in d]


# --------------------------------------------------------------------------
# cardinality oracle

def _check_specified(node: PlanNode) -> None:
    if node.unspecified:
        raise ContractError("cardinality needs a subtree without unspecified scans")


def set_cardinality(catalog: Catalog, query: Query, rels: frozenset) -> float:
    """Exact row count of joining ``rels`` under the query's predicates and join edges."""
    key = (query, rels)
    hit = catalog._card_cache.get(key)
    if hit is not None:
        return hit
    edges = [e for e in query.join_edges if e.left_rel in rels and e.right_rel in rels]
    weights = {}
    for r in rels:
        mask = catalog.relation_mask(query, r)
        n = catalog.table(r).row_count
        weights[r] = np.ones(n) if mask is None else mask.astype(float)
    total = 1.0
    remaining = set(rels)
    while remaining:
        root = min(remaining, key=lambda r: query.relations.index(r))
        total *= _tree_count(catalog, root, edges, weights, remaining)
    catalog._card_cache[key] = total
    return total


def _tree_count(catalog, root, edges, weights, remaining) -> float:
    """Acyclic join counting by passing per-key weight sums up a join tree."""
    order, parent_edge = [root], {root: None}
    remaining.discard(root)
    i = 0
    while i < len(order):
        r = order[i]
        for e in edges:
            if r in e.rels:
                other = e.right_rel if r == e.left_rel else e.left_rel
                if other in remaining:
                    remaining.discard(other)
                    parent_edge[other] = e
                    order.append(other)
                elif other not in parent_edge:
                    continue
        i += 1
    w = {r: weights[r].copy() for r in order}
    for r in reversed(order[1:]):
        e = parent_edge[r]
        p = e.right_rel if r == e.left_rel else e.left_rel
        child_key = catalog.column(r, e.column_for(r))
        parent_key = catalog.column(p, e.column_for(p))
        size = int(max(child_key.max(initial=0), parent_key.max(initial=0))) + 1
        msg = np.bincount(child_key, weights=w[r], minlength=size)
        w[p] = w[p] * msg[parent_key]
    return float(w[root].sum())


def true_cardinality(catalog: Catalog, plan_node: PlanNode, query: Query) -> float:
    _check_specified(plan_node)
    return set_cardinality(catalog, query, plan_node.rels)


# --------------------------------------------------------------------------
# latency model

@dataclass
class LatencyModel:
    c_ts: float = 1.0
    c_io: float = 50.0
    c_is: float = 2.0
    c_l: float = 0.01
    c_hb: float = 1.5
    c_hp: float = 1.0
    c_ho: float = 0.5
    c_m: float = 1.0
    c_s: float = 0.2
    sigma: float = 0.0
    noise_seed: int = 0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k.startswith("c_") and not v > 0:
                raise ConfigError(f"{k} must be positive")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "LatencyModel":
        return cls(**d)


class _KeyClasses:
    """Equivalence classes of join columns induced by the query's join edges."""

    def __init__(self, query: Query):
        self.parent: dict = {}
        for e in query.join_edges:
            self._union((e.left_rel, e.left_col), (e.right_rel, e.right_col))

    def _find(self, x):
        self.parent.setdefault(x, x)
        while self.parent[x] != x:
            x = self.parent[x]
        return x

    def _union(self, a, b):
        ra, rb = self._find(a), self._find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)

    def cls(self, rel, col):
        return self._find((rel, col))


_KEYCLASS_CACHE: dict = {}


def key_classes(query: Query) -> _KeyClasses:
    kc = _KEYCLASS_CACHE.get(query)
    if kc is None:
        if len(_KEYCLASS_CACHE) > 50000:
            _KEYCLASS_CACHE.clear()
        kc = _KEYCLASS_CACHE[query] = _KeyClasses(query)
    return kc


def join_key(query: Query, node) -> tuple | None:
    """Key class a join merges on (first connecting edge), or None for a cross product."""
    edges = query.edges_between(node.left.rels, node.right.rels)
    if not edges:
        return None
    e = edges[0]
    return key_classes(query).cls(e.left_rel, e.left_col)


def plan_cost(catalog: Catalog, node: PlanNode, query: Query, model: LatencyModel, card) -> tuple:
    """Return ``(cost, rows, ordered_on)`` for ``node`` given a cardinality function.

    The recursion order (left cost + right cost + local term) is shared with the
    expert's dynamic program so both sum in the same floating-point order.
    """
    if not node.is_join:
        rows = card(node.rels)
        if node.kind == "table":
            return model.c_ts * catalog.table(node.rel).row_count, rows, None
        if node.kind == "index":
            t = catalog.table(node.rel)
            return model.c_io + model.c_is * rows, rows, key_classes(query).cls(node.rel, t.index_column)
        raise ContractError("cannot cost an unspecified scan")
    lc, lrows, lord = plan_cost(catalog, node.left, query, model, card)
    rc, rrows, rord = plan_cost(catalog, node.right, query, model, card)
    out = card(node.rels)
    key = join_key(query, node) if node.op == "merge" else None
    local = join_local_cost(model, node.op, lrows, rrows, out, lord == key and key is not None,
                            rord == key and key is not None)
    return lc + rc + local, out, key


def join_local_cost(model: LatencyModel, op: str, left: float, right: float, out: float,
                    left_sorted: bool = False, right_sorted: bool = False) -> float:
    if op == "loop":
        return model.c_l * left * right
    if op == "hash":
        return model.c_hb * left + model.c_hp * right + model.c_ho * out
    cost = model.c_m * (left + right) + model.c_ho * out
    if not left_sorted:
        cost += model.c_s * left * math.log2(left + 1)
    if not right_sorted:
        cost += model.c_s * right * math.log2(right + 1)
    return cost


def simulate_latency(catalog: Catalog, plan: PlanForest, query: Query,
                     model: LatencyModel | None = None) -> float:
    model = model or LatencyModel()
    if not is_complete(plan, query):
        raise ContractError("latency is only defined for complete plans")
    cost, _, _ = plan_cost(catalog, plan.roots[0], query, model,
                           lambda rels: set_cardinality(catalog, query, rels))
    if model.sigma > 0:
        digest = hashlib.sha256(f"{model.noise_seed}\x00{query.query_id}\x00{plan.key}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        cost *= float(rng.lognormal(0.0, model.sigma))
    return float(cost)
