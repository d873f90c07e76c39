import os
import random

import pytest
from hypothesis import HealthCheck, settings

from neolite.qpcore import JoinEdge, Query, children, is_complete
from neolite.simdb import (SchemaConfig, TableSpec, WorkloadConfig, generate_catalog, generate_workload,
                           imdb_like_schema)

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
settings.register_profile("thorough", parent=settings.get_profile("default"), max_examples=1000)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# Invariant suites request this many examples explicitly.
MANY = 1000


def chain_query(qid="q", rels=("A", "B", "C", "D"), preds=()):
    edges = tuple(JoinEdge.make(a, "id", b, f"{a.lower()}_id") for a, b in zip(rels, rels[1:]))
    return Query(qid, tuple(rels), edges, tuple(preds))


def star_query(qid="s", hub="F", spokes=("A", "B", "C")):
    rels = tuple(sorted((hub,) + tuple(spokes)))
    edges = tuple(JoinEdge.make(hub, f"{s.lower()}_id", s, "id") for s in spokes)
    return Query(qid, rels, edges)


def random_walk(plan, query, rng, steps=None, indexed=None, allow_cross_products=False):
    """Apply random children() actions; ``steps=None`` walks to completion."""
    taken = 0
    while not is_complete(plan, query) and (steps is None or taken < steps):
        plan = rng.choice(children(plan, query, allow_cross_products, indexed))
        taken += 1
    return plan


def tiny_schema(strength=0.0, skew=0.0):
    """Star with two dimensions; small enough for exhaustive oracles."""
    tables = [
        TableSpec("dim_a", 60, {"cat": 6, "val": 10}, {}),
        TableSpec("dim_b", 40, {"cat": 6, "grp": 4}, {}),
        TableSpec("fact", 400, {"amt": 20}, {"a_id": "dim_a", "b_id": "dim_b"},
                  index_column="a_id", skew=skew),
    ]
    corr = []
    if strength:
        from neolite.simdb import CorrelationSpec
        corr = [CorrelationSpec("dim_a.cat", "dim_b.cat", strength)]
    return SchemaConfig(tables, corr)


@pytest.fixture(scope="session")
def imdb_catalog():
    return generate_catalog(imdb_like_schema(), 0)


@pytest.fixture(scope="session")
def imdb_workload(imdb_catalog):
    return generate_workload(imdb_catalog, WorkloadConfig(queries=30), 3)


@pytest.fixture(scope="session")
def small_queries(imdb_catalog):
    """Queries with at most four relations."""
    return generate_workload(imdb_catalog, WorkloadConfig(queries=40, joins=(1, 3)), 11)


@pytest.fixture(scope="session")
def tiny_catalog():
    return generate_catalog(tiny_schema(), 1)


@pytest.fixture
def rng():
    return random.Random(1234)


# Acceptance results, one line per criterion, repeated in the terminal summary.
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
