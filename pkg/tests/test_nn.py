import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import MANY, chain_query
from neolite import nn
from neolite.featurize import encode_plan
from neolite.qpcore import Join, PlanForest, Scan


def random_forest(rng, max_nodes=15, channels=4):
    """Random binary forest in pre-order layout; returns (x, left, right, roots)."""
    n_total = int(rng.integers(1, max_nodes + 1))
    left, right, roots = [], [], []

    def build(budget):
        me = len(left)
        left.append(-1)
        right.append(-1)
        budget -= 1
        if budget >= 2 and rng.random() < 0.7:
            lb = int(rng.integers(1, budget))
            left[me] = build(lb)
            right[me] = build(budget - lb)
        return me

    remaining = n_total
    while remaining > 0:
        size = int(rng.integers(1, remaining + 1))
        if size % 2 == 0 and size > 1:
            size -= 1  # full binary trees have odd size
        roots.append(build(size))
        remaining -= size
    x = rng.normal(size=(len(left), channels))
    return x, np.asarray(left), np.asarray(right), np.asarray(roots)


def brute_conv(x, left, right, W, b):
    out = np.zeros((len(x), W.shape[2]))
    zero = np.zeros(x.shape[1])
    for i in range(len(x)):
        xl = x[left[i]] if left[i] >= 0 else zero
        xr = x[right[i]] if right[i] >= 0 else zero
        for k in range(W.shape[2]):
            z = W[0, :, k] @ x[i] + W[1, :, k] @ xl + W[2, :, k] @ xr + b[k]
            out[i, k] = z if z > 0 else 0.01 * z
    return out


# ---------------------------------------------------------------- tree convolution

def test_tree_conv_matches_per_node_loop():
    rng = np.random.default_rng(0)
    for _ in range(100):
        cin, cout = int(rng.integers(1, 33)), int(rng.integers(1, 33))
        x, l, r, _ = random_forest(rng, 15, cin)
        bank = nn.Filterbank(rng.normal(size=(3, cin, cout)), rng.normal(size=cout))
        assert np.abs(nn.tree_conv(x, l, r, bank) - brute_conv(x, l, r, bank.weights, bank.bias)).max() < 1e-6


def _detector(width):
    w = np.zeros((3, width, 1))
    w[0, :2, 0] = [1, -1]
    w[1, :2, 0] = [1, -1]
    return nn.Filterbank(w, np.zeros(1))


def test_merge_over_merge_detector():
    q = chain_query("f7", ("A", "B", "C", "D"))
    ops = ("merge", "hash")
    mm = PlanForest.of(q, Join("merge", Join("merge", Scan("A", "table"), Scan("B", "table")),
                               Join("hash", Scan("C", "table"), Scan("D", "table"))))
    hm = PlanForest.of(q, Join("hash", Join("merge", Scan("A", "table"), Scan("B", "table")),
                               Join("hash", Scan("C", "table"), Scan("D", "table"))))
    for plan, expect in ((mm, 2.0), (hm, 0.0)):
        t = encode_plan(plan, ("A", "B", "C", "D"), ops)
        out = nn.tree_conv(t.vectors, t.left, t.right, _detector(t.vectors.shape[1]))
        assert out[t.roots[0], 0] == expect


def test_zero_filterbank_gives_zero_output():
    rng = np.random.default_rng(1)
    x, l, r, _ = random_forest(rng, 9, 5)
    out = nn.tree_conv(x, l, r, nn.Filterbank(np.zeros((3, 5, 4)), np.zeros(4)))
    assert out.shape == (len(x), 4) and not out.any()


def test_tree_conv_shape_errors():
    with pytest.raises(nn.ShapeError):
        nn.Filterbank(np.zeros((2, 3, 4)), np.zeros(4))
    with pytest.raises(nn.ShapeError):
        nn.Filterbank(np.zeros((3, 3, 4)), np.zeros(3))
    bank = nn.Filterbank(np.zeros((3, 3, 4)), np.zeros(4))
    with pytest.raises(nn.ShapeError):
        nn.tree_conv(np.zeros((2, 5)), np.array([-1, -1]), np.array([-1, -1]), bank)


def test_conv_weight_gradient_two_nodes_by_hand():
    # parent 0 with only a left child 1; linear filter so dz = dout
    x = np.array([[1.0, 2.0], [3.0, -1.0]])
    left, right = np.array([1, -1]), np.array([-1, -1])
    W = np.zeros((3, 2, 1))
    dout = np.array([[0.5], [2.0]])
    _, cache = nn.tree_conv_forward(x, left, right, W, np.zeros(1), activation=False)
    _, dW, db = nn.tree_conv_backward(dout, W, cache, activation=False)
    zero = np.zeros(2)
    expect = np.zeros((3, 2, 1))
    for i, (xl, xr) in enumerate([(x[1], zero), (zero, zero)]):
        expect[0, :, 0] += dout[i, 0] * x[i]
        expect[1, :, 0] += dout[i, 0] * xl
        expect[2, :, 0] += dout[i, 0] * xr
    assert np.allclose(dW, expect) and db.tolist() == [2.5]


@settings(max_examples=MANY)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 3))
def test_receptive_field(seed, depth):
    rng = np.random.default_rng(seed)
    x, l, r, _ = random_forest(rng, 15, 3)
    parent = {int(c): i for i in range(len(x)) for c in (l[i], r[i]) if c >= 0}
    banks = [nn.Filterbank(rng.normal(size=(3, 3, 3)), rng.normal(size=3)) for _ in range(depth)]

    def run(inp):
        for b in banks:
            inp = nn.tree_conv(inp, l, r, b)
        return inp

    node = int(rng.integers(len(x)))
    reach = {node}
    cur = node
    for _ in range(depth):
        if cur not in parent:
            break
        cur = parent[cur]
        reach.add(cur)
    bumped = x.copy()
    bumped[node] += rng.normal(size=3)
    changed = np.flatnonzero(np.abs(run(bumped) - run(x)).max(axis=1) > 0)
    assert set(changed.tolist()) <= reach


# ---------------------------------------------------------------- pooling

def test_pool_examples():
    pooled, arg = nn.dynamic_pool(np.array([[1.0, 5.0], [3.0, 2.0]]))
    assert pooled.tolist() == [[3.0, 5.0]] and arg.tolist() == [[1, 0]]
    one = np.array([[4.0, -1.0]])
    assert nn.dynamic_pool(one)[0].tolist() == one.tolist()
    with pytest.raises(ValueError):
        nn.dynamic_pool(np.zeros((0, 2)))


def test_pool_ties_route_to_first_node():
    x = np.array([[1.0], [1.0], [0.0]])
    _, arg = nn.dynamic_pool(x)
    assert arg.tolist() == [[0]]
    assert nn.dynamic_pool_backward(np.array([[2.0]]), arg, 3).ravel().tolist() == [2.0, 0.0, 0.0]


@settings(max_examples=MANY)
@given(st.integers(0, 2 ** 32 - 1))
def test_pool_is_order_invariant(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(int(rng.integers(1, 12)), 4))
    assert np.array_equal(nn.dynamic_pool(x)[0], nn.dynamic_pool(x[rng.permutation(len(x))])[0])


def test_segmented_pool():
    x = np.array([[1.0], [4.0], [2.0], [0.5]])
    pooled, arg = nn.dynamic_pool(x, np.array([0, 2]))
    assert pooled.ravel().tolist() == [4.0, 2.0] and arg.ravel().tolist() == [1, 2]


# ---------------------------------------------------------------- dense

def _dense_params(layer, W=None, b=None):
    p = {}
    layer.init(p, np.random.default_rng(0))
    if W is not None:
        p[f"{layer.name}.W"] = W
        p[f"{layer.name}.b"] = b
    return p


def test_dense_identity():
    layer = nn.DenseLayer("d", 3, 3, layer_norm=False, activation=False)
    p = _dense_params(layer, np.eye(3), np.zeros(3))
    x = np.array([1.0, -2.0, 3.5])
    assert nn.dense_forward(x, layer, p).tolist() == x.tolist()


def test_leaky_slope():
    layer = nn.DenseLayer("d", 1, 1, layer_norm=False, activation=True)
    p = _dense_params(layer, np.eye(1), np.zeros(1))
    assert nn.dense_forward(np.array([-1.0]), layer, p)[0] == pytest.approx(-0.01)


def test_layer_norm_standardizes():
    rng = np.random.default_rng(2)
    layer = nn.DenseLayer("d", 6, 16, layer_norm=True, activation=False)
    p = _dense_params(layer)
    y = nn.dense_forward(rng.normal(size=(5, 6)) * 10, layer, p)
    assert np.allclose(y.mean(axis=1), 0, atol=1e-9)
    assert np.allclose(y.var(axis=1), 1, atol=1e-6)


def test_dense_shape_error():
    layer = nn.DenseLayer("d", 3, 2)
    with pytest.raises(nn.ShapeError):
        nn.dense_forward(np.zeros(4), layer, _dense_params(layer))


# ---------------------------------------------------------------- gradients

def _num_grad(f, p, eps=1e-4):
    g = np.zeros_like(p)
    it = np.nditer(p, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = p[i]
        p[i] = old + eps
        up = f()
        p[i] = old - eps
        down = f()
        p[i] = old
        g[i] = (up - down) / (2 * eps)
    return g


def _rel_err(a, b):
    return np.abs(a - b).max() / max(1e-8, np.abs(a).max() + np.abs(b).max())


@pytest.mark.parametrize("ln,act", [(True, True), (False, True), (True, False)])
def test_dense_gradients(ln, act):
    rng = np.random.default_rng(3)
    layer = nn.DenseLayer("d", 4, 5, ln, act)
    p = _dense_params(layer)
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 5))

    def loss():
        return float((layer.forward(p, x)[0] * w).sum())

    _, cache = layer.forward(p, x)
    dx, grads = layer.backward(p, w, cache)
    for k, g in grads.items():
        assert _rel_err(g, _num_grad(loss, p[k])) < 1e-4
    assert _rel_err(dx, _num_grad(loss, x)) < 1e-4


def test_tree_conv_and_pool_gradients():
    rng = np.random.default_rng(4)
    x, l, r, _ = random_forest(rng, 11, 4)
    layer = nn.TreeConvLayer("c", 4, 3)
    p = {}
    layer.init(p, rng)
    p["c.b"] = rng.normal(size=3)
    w = rng.normal(size=(1, 3))

    def loss():
        h, _ = layer.forward(p, x, l, r)
        return float((nn.dynamic_pool(h)[0] * w).sum())

    h, cache = layer.forward(p, x, l, r)
    _, arg = nn.dynamic_pool(h)
    dh = nn.dynamic_pool_backward(w, arg, len(h))
    dx, grads = layer.backward(p, dh, cache)
    for k, g in grads.items():
        assert _rel_err(g, _num_grad(loss, p[k])) < 1e-4
    assert _rel_err(dx, _num_grad(loss, x)) < 1e-4


def test_zero_upstream_gradient_gives_zero_gradients():
    rng = np.random.default_rng(5)
    layer = nn.DenseLayer("d", 3, 3)
    p = _dense_params(layer)
    _, cache = layer.forward(p, rng.normal(size=(2, 3)))
    dx, grads = layer.backward(p, np.zeros((2, 3)), cache)
    assert not dx.any() and not any(g.any() for g in grads.values())


# ---------------------------------------------------------------- adam

def test_adam_zero_gradient_keeps_parameters():
    p = {"w": np.array([1.0, -2.0])}
    s = nn.AdamState()
    nn.adam_step(p, {"w": np.zeros(2)}, s)
    assert p["w"].tolist() == [1.0, -2.0] and s.step == 1


def test_adam_first_step_by_hand():
    p = {"w": np.array([0.5])}
    s = nn.AdamState(lr=1e-3)
    nn.adam_step(p, {"w": np.array([1.0])}, s)
    # m_hat = 1, v_hat = 1
    assert p["w"][0] == pytest.approx(0.5 - 1e-3 / (1 + 1e-8), abs=1e-15)


def test_adam_shape_error():
    with pytest.raises(nn.ShapeError):
        nn.adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, nn.AdamState())


def test_adam_is_deterministic():
    def run():
        rng = np.random.default_rng(7)
        p = {"w": rng.normal(size=4)}
        s = nn.AdamState()
        for _ in range(20):
            nn.adam_step(p, {"w": rng.normal(size=4)}, s)
        return p["w"]

    assert np.array_equal(run(), run())


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_is_byte_stable(tmp_path):
    rng = np.random.default_rng(6)
    params = {"a.W": rng.normal(size=(3, 2)), "a.b": rng.normal(size=2)}
    adam = nn.AdamState(lr=0.01)
    nn.adam_step(params, {k: np.ones_like(v) for k, v in params.items()}, adam)
    f1, f2 = tmp_path / "one.npz", tmp_path / "two.npz"
    nn.save_checkpoint(f1, params, adam, {"tag": "x"})
    nn.save_checkpoint(f2, params, adam, {"tag": "x"})
    assert f1.read_bytes() == f2.read_bytes()
    back, adam2, extra = nn.load_checkpoint(f1)
    assert extra == {"tag": "x"} and adam2.step == 1 and adam2.lr == 0.01
    for k in params:
        assert np.array_equal(back[k], params[k])
        assert np.array_equal(adam2.m[k], adam.m[k]) and np.array_equal(adam2.v[k], adam.v[k])
