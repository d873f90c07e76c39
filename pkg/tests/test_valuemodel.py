import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import MANY, chain_query, random_walk
from neolite import nn
from neolite.featurize import Featurizer, encode_plan
from neolite.qpcore import (ContractError, Join, PlanForest, Scan, construction_states,
                            is_subplan)
from neolite.valuemodel import (CostMode, ExperienceEntry, IntegrityError, NetConfig, TargetTable, ValueNet,
                                build_training_set, encode_samples, load_net, make_batch, save_net, train)

ABC = ("A", "B", "C")
QUERIES = {q.query_id: q for q in (chain_query("q3", ABC), chain_query("q4"))}


def _entry(qid, plan, latency, baseline=1.0):
    return ExperienceEntry(qid, plan, latency, baseline)


def _random_experience(rnd, n):
    out = []
    for _ in range(n):
        q = QUERIES[rnd.choice(sorted(QUERIES))]
        plan = random_walk(PlanForest.initial(q), q, rnd)
        out.append(_entry(q.query_id, plan, rnd.choice([1.0, 2.0, 5.0, 10.0, rnd.uniform(0.5, 100)]),
                          rnd.uniform(0.5, 50)))
    return out


# ---------------------------------------------------------------- targets

def test_single_plan_gives_two_n_equal_targets():
    q = chain_query("two", ("A", "B"))
    plan = PlanForest.of(q, Join("hash", Scan("A", "table"), Scan("B", "index")))
    samples = build_training_set([_entry("two", plan, 30.0)], "absolute")
    assert len(samples) == 4
    assert {s.target for s in samples} == {math.log1p(30.0)}


def test_shared_root_state_takes_the_minimum():
    q = chain_query("two", ("A", "B"))
    p1 = PlanForest.of(q, Join("hash", Scan("A", "table"), Scan("B", "table")))
    p2 = PlanForest.of(q, Join("loop", Scan("A", "index"), Scan("B", "index")))
    samples = build_training_set([_entry("two", p1, 10.0), _entry("two", p2, 4.0)], "absolute")
    root = PlanForest.initial(q).key
    assert [s.target for s in samples if s.plan.key == root] == [math.log1p(4.0)]
    assert [s.target for s in samples if s.plan.key == p1.key] == [math.log1p(10.0)]


def test_relative_mode_at_baseline_is_ln2():
    q = chain_query("two", ("A", "B"))
    plan = PlanForest.of(q, Join("merge", Scan("A", "table"), Scan("B", "table")))
    samples = build_training_set([_entry("two", plan, 7.0, 7.0)], CostMode.RELATIVE)
    assert all(s.target == pytest.approx(math.log(2)) for s in samples)


def test_identity_transform_and_errors():
    q = chain_query("two", ("A", "B"))
    plan = PlanForest.of(q, Join("merge", Scan("A", "table"), Scan("B", "table")))
    assert {s.target for s in build_training_set([_entry("two", plan, 7.0)], "absolute",
                                                 transform="identity")} == {7.0}
    with pytest.raises(ContractError):
        build_training_set([], "absolute")
    with pytest.raises(ContractError):
        _entry("two", plan, 0.0)
    with pytest.raises(ValueError):
        CostMode("bogus")


def test_queries_do_not_share_targets():
    q3, q4 = QUERIES["q3"], QUERIES["q4"]
    rnd = random.Random(0)
    e3 = _entry("q3", random_walk(PlanForest.initial(q3), q3, rnd), 100.0)
    e4 = _entry("q4", random_walk(PlanForest.initial(q4), q4, rnd), 1.0)
    for s in build_training_set([e3, e4], "absolute"):
        assert s.target == math.log1p(100.0 if s.query_id == "q3" else 1.0)


@settings(max_examples=MANY)
@given(st.randoms(use_true_random=False), st.integers(1, 8), st.sampled_from(list(CostMode)))
def test_targets_follow_the_min_rule(rnd, n, mode):
    exp = _random_experience(rnd, n)
    samples = build_training_set(exp, mode)
    keys = set()
    for s in samples:
        assert (s.query_id, s.plan.key) not in keys
        keys.add((s.query_id, s.plan.key))
        costs = [math.log1p(e.cost(mode)) for e in exp if e.query_id == s.query_id and is_subplan(s.plan, e.plan)]
        assert costs and s.target == min(costs)
    # every construction state of every entry has a sample
    for e in exp:
        for st_ in construction_states(e.plan):
            assert (e.query_id, st_.key) in keys
    # a complete plan's target is its own best experienced cost
    for e in exp:
        own = min(math.log1p(f.cost(mode)) for f in exp if f.query_id == e.query_id and f.plan.key == e.plan.key)
        assert next(s.target for s in samples if s.query_id == e.query_id and s.plan.key == e.plan.key) == own


@settings(max_examples=MANY)
@given(st.randoms(use_true_random=False), st.integers(1, 8), st.sampled_from(list(CostMode)))
def test_incremental_table_equals_batch_build(rnd, n, mode):
    exp = _random_experience(rnd, n)
    table = TargetTable(mode)
    for i, e in enumerate(exp):
        table.add(e)
        want = {(s.query_id, s.plan.key): s.target for s in build_training_set(exp[:i + 1], mode)}
        got = {(s.query_id, s.plan.key): s.target for s in table.samples()}
        assert got == want
    for qid in QUERIES:
        costs = [e.cost(mode) for e in exp if e.query_id == qid]
        assert table.best_cost(qid) == (min(costs) if costs else math.inf)


@settings(max_examples=MANY)
@given(st.lists(st.integers(0, 10 ** 9), min_size=2, max_size=20))
def test_transform_preserves_plan_order(costs):
    t = [math.log1p(c) for c in costs]
    assert sorted(range(len(costs)), key=lambda i: (costs[i], i)) == sorted(range(len(t)), key=lambda i: (t[i], i))


# ---------------------------------------------------------------- network

def _mini_config(fz, **kw):
    base = dict(query_width=fz.query_width, node_width=fz.node_width, query_layers=(8, 4),
                conv_channels=(8, 6), post_layers=(4,), seed=0)
    base.update(kw)
    return NetConfig(**base)


@pytest.fixture(scope="module")
def fz(tiny_catalog):
    return Featurizer(tiny_catalog, "histogram")


@pytest.fixture(scope="module")
def tiny_samples(tiny_catalog, fz):
    from neolite.simdb import WorkloadConfig, generate_workload, simulate_latency
    qs = generate_workload(tiny_catalog, WorkloadConfig(queries=10, joins=(1, 2)), 5)
    rnd = random.Random(3)
    exp = []
    for q in qs:
        for _ in range(3):
            plan = random_walk(PlanForest.initial(q), q, rnd, indexed=tiny_catalog.indexed)
            exp.append(_entry(q.query_id, plan, simulate_latency(tiny_catalog, plan, q)))
    samples = build_training_set(exp, "absolute", fz, {q.query_id: q for q in qs})
    return samples


def test_fresh_net_is_finite_and_pure(fz, tiny_samples):
    net = ValueNet(NetConfig(fz.query_width, fz.node_width))
    s = tiny_samples[0]
    a = net.predict(s.qvec, s.ptree)
    assert np.isfinite(a)
    same = Featurizer(fz.catalog, "histogram").plan(s.plan)
    assert net.predict(s.qvec, same) == a


def test_predict_shape_error(fz, tiny_samples):
    net = ValueNet(_mini_config(fz))
    s = tiny_samples[0]
    with pytest.raises(nn.ShapeError):
        net.predict(np.zeros(fz.query_width + 1), s.ptree)


def test_overfits_one_sample(fz, tiny_samples):
    net = ValueNet(_mini_config(fz, query_layers=(32, 16), conv_channels=(32, 16), post_layers=(8,)))
    s = tiny_samples[-1]
    net.fit_normalizer(np.array([s.target - 1.0, s.target + 1.0]))
    train(net, [s], steps=500, batch=1)
    assert abs(net.predict(s.qvec, s.ptree) - s.target) < 0.01 * s.target


def test_training_lowers_loss(fz, tiny_samples):
    data = tiny_samples[:50]
    assert len(data) == 50
    drops = []
    for seed in range(5):
        net = ValueNet(_mini_config(fz, query_layers=(32, 16), conv_channels=(32, 16), seed=seed))
        b = make_batch([(s.qvec, s.ptree) for s in data])
        t = np.array([s.target for s in data])
        net.fit_normalizer(t)
        before = np.mean((net.forward(b)[0] - net._norm(t)) ** 2)
        losses = train(net, data, steps=300, batch=16, seed=seed)
        assert np.isfinite(losses).all() and len(losses) == 300
        drops.append(np.mean((net.forward(b)[0] - net._norm(t)) ** 2) - before)
    assert np.median(drops) < 0


def test_zero_steps_leave_net_unchanged(fz, tiny_samples):
    net = ValueNet(_mini_config(fz))
    before = {k: v.copy() for k, v in net.params.items()}
    assert train(net, tiny_samples, steps=0) == []
    assert all(np.array_equal(before[k], net.params[k]) for k in before)
    assert not net.trained


def test_training_is_deterministic(fz, tiny_samples):
    def run():
        net = ValueNet(_mini_config(fz))
        train(net, tiny_samples, steps=20, seed=4)
        return net.params

    a, b = run(), run()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_training_needs_encoded_samples(fz, tiny_samples):
    net = ValueNet(_mini_config(fz))
    with pytest.raises(ContractError):
        train(net, [])
    raw = build_training_set([_entry(tiny_samples[-1].query_id, tiny_samples[-1].plan, 3.0)], "absolute")
    with pytest.raises(ContractError):
        train(net, raw)


def test_plan_scorer_matches_predict(tiny_catalog, fz, tiny_samples):
    net = ValueNet(_mini_config(fz, query_layers=(16, 8), conv_channels=(16, 8, 4)))
    train(net, tiny_samples, steps=30)
    by_q = {}
    for s in tiny_samples:
        by_q.setdefault(s.query_id, []).append(s)
    for qid, group in by_q.items():
        scorer = net.evaluator(group[0].qvec, fz)
        got = scorer([s.plan for s in group])
        want = [net.predict(s.qvec, s.ptree) for s in group]
        assert np.allclose(got, want, atol=1e-9)
        # second call hits the memo and must agree
        assert np.allclose(scorer([s.plan for s in group[::-1]]), want[::-1], atol=1e-9)


def test_snapshot_is_frozen(fz, tiny_samples):
    net = ValueNet(_mini_config(fz))
    snap = net.snapshot()
    s = tiny_samples[0]
    before = snap.predict(s.qvec, s.ptree)
    train(net, tiny_samples, steps=5)
    assert snap.predict(s.qvec, s.ptree) == before


def _rel_err(a, b):
    return np.abs(a - b).max() / max(1e-8, np.abs(a).max() + np.abs(b).max())


@pytest.mark.parametrize("layer_norm", [True, False])
def test_mini_value_net_gradients(fz, tiny_samples, layer_norm):
    cfg = _mini_config(fz, query_layers=(6,), conv_channels=(8, 5), post_layers=(4,), layer_norm=layer_norm)
    net = ValueNet(cfg)
    data = tiny_samples[:6]
    b = make_batch([(s.qvec, s.ptree) for s in data])
    t = np.array([s.target for s in data])
    net.fit_normalizer(t)
    tn = net._norm(t)
    _, grads = net.loss_and_grads(b, tn)
    eps = 1e-4
    for k, p in net.params.items():
        num = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + eps
            up = net.loss_and_grads(b, tn)[0]
            p[i] = old - eps
            down = net.loss_and_grads(b, tn)[0]
            p[i] = old
            num[i] = (up - down) / (2 * eps)
        assert _rel_err(grads[k], num) < 1e-4, k


def test_save_and_load(tmp_path, fz, tiny_samples):
    net = ValueNet(_mini_config(fz))
    train(net, tiny_samples, steps=10)
    path = tmp_path / "net.npz"
    save_net(path, net, {"catalog": "abc", "variant": "histogram"})
    back, extra = load_net(path, {"catalog": "abc"})
    s = tiny_samples[3]
    assert back.predict(s.qvec, s.ptree) == net.predict(s.qvec, s.ptree)
    assert back.adam.step == net.adam.step and extra["variant"] == "histogram"
    with pytest.raises(IntegrityError):
        load_net(path, {"catalog": "xyz"})
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(IntegrityError):
        load_net(path)


def test_encode_samples_is_idempotent(tiny_catalog, fz, tiny_samples):
    s = tiny_samples[0]
    q, t = s.qvec, s.ptree
    encode_samples([s], fz, {})
    assert s.qvec is q and s.ptree is t
    assert np.array_equal(t.vectors, encode_plan(s.plan, tiny_catalog).vectors)
