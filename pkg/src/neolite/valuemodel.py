"""Value network, training targets from experience, and the training loop.

Forward pass for one (query, forest) pair:

    g   = dense stack(query vector)
    x'  = [x | g] for every node         (the query vector is copied onto each node)
    h   = conv3(conv2(conv1(x')))        (shared filters over parent/left/right)
    p   = channel-wise max over all nodes of all trees
    out = dense stack(p) -> scalar

The scalar is a standardized transformed cost; ``predict`` undoes the
standardization so callers see ``transform(C)`` directly.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from . import nn
from .featurize import Featurizer, PlanVecTree
from .qpcore import ContractError, PlanForest, SubplanIndex, construction_states, is_subplan
from .simdb import ConfigError


class IntegrityError(RuntimeError):
    """Persisted artifacts do not belong together (hash or manifest mismatch)."""


class CostMode(str, Enum):
    ABSOLUTE = "absolute"
    RELATIVE = "relative"


TRANSFORMS = {
    "log1p": (math.log1p, math.expm1),
    "identity": (lambda c: c, lambda t: t),
}


@dataclass
class ExperienceEntry:
    query_id: str
    plan: PlanForest
    latency: float
    baseline: float

    def __post_init__(self):
        if not (self.latency > 0 and self.baseline > 0):
            raise ContractError("latency and baseline must be positive")

    def cost(self, mode: CostMode | str) -> float:
        return self.latency if CostMode(mode) is CostMode.ABSOLUTE else self.latency / self.baseline

    def to_json(self) -> dict:
        return {"query_id": self.query_id, "plan": self.plan.to_json(),
                "latency": self.latency, "baseline": self.baseline}


# --------------------------------------------------------------------------
# targets

@dataclass
class Sample:
    query_id: str
    plan: PlanForest
    target: float
    qvec: np.ndarray | None = None
    ptree: PlanVecTree | None = None


class TargetTable:
    """Incrementally maintained training targets.

    For every state on the construction path of an experienced plan the
    target is the transformed minimum cost over all experienced completions
    of the same query that contain it.  Adding entries one at a time gives
    exactly what :func:`build_training_set` computes from scratch.
    """

    def __init__(self, cost_mode: CostMode | str = CostMode.ABSOLUTE, transform: str = "log1p"):
        self.cost_mode = CostMode(cost_mode)
        if transform not in TRANSFORMS:
            raise ConfigError(f"unknown target transform {transform!r}")
        self.transform = transform
        self._states: dict[str, dict[str, list]] = {}   # qid -> key -> [plan, best cost]
        self._done: dict[str, list[tuple[SubplanIndex, float]]] = {}
        self._order: list[tuple[str, str]] = []

    def add(self, entry: ExperienceEntry) -> None:
        c = entry.cost(self.cost_mode)
        qid = entry.query_id
        states = self._states.setdefault(qid, {})
        done = self._done.setdefault(qid, [])
        idx = SubplanIndex(entry.plan)
        for rec in states.values():
            if c < rec[1] and idx.contains(rec[0]):
                rec[1] = c
        done.append((idx, c))
        for s in construction_states(entry.plan):
            if s.key in states:
                continue
            best = min(cc for other, cc in done if other.contains(s))
            states[s.key] = [s, best]
            self._order.append((qid, s.key))

    def extend(self, entries: Iterable[ExperienceEntry]) -> "TargetTable":
        for e in entries:
            self.add(e)
        return self

    def __len__(self):
        return len(self._order)

    def samples(self) -> list[Sample]:
        fwd = TRANSFORMS[self.transform][0]
        out = []
        for qid, key in self._order:
            plan, c = self._states[qid][key]
            out.append(Sample(qid, plan, fwd(c)))
        return out

    def best_cost(self, query_id: str) -> float:
        return min((c for _, c in self._done.get(query_id, [])), default=math.inf)


def build_training_set(experience: Sequence[ExperienceEntry], cost_mode: CostMode | str,
                       featurizer: Featurizer | None = None, queries: dict | None = None,
                       transform: str = "log1p") -> list[Sample]:
    """Samples for every construction state of every experienced plan.

    Direct (non-incremental) evaluation of the min rule; when a featurizer
    and a ``query_id -> Query`` map are given the samples come encoded.
    """
    if not experience:
        raise ContractError("cannot build a training set from empty experience")
    mode = CostMode(cost_mode)
    fwd = TRANSFORMS[transform][0]
    by_query: dict[str, list[ExperienceEntry]] = {}
    for e in experience:
        by_query.setdefault(e.query_id, []).append(e)
    seen = set()
    out = []
    for e in experience:
        for s in construction_states(e.plan):
            k = (e.query_id, s.key)
            if k in seen:
                continue
            seen.add(k)
            best = min(f.cost(mode) for f in by_query[e.query_id] if is_subplan(s, f.plan))
            out.append(Sample(e.query_id, s, fwd(best)))
    if featurizer is not None:
        encode_samples(out, featurizer, queries)
    return out


def encode_samples(samples: Sequence[Sample], featurizer: Featurizer, queries: dict) -> None:
    for s in samples:
        if s.qvec is None:
            s.qvec = featurizer.query(queries[s.query_id])
        if s.ptree is None:
            s.ptree = featurizer.plan(s.plan)


# --------------------------------------------------------------------------
# network

@dataclass
class NetConfig:
    query_width: int
    node_width: int
    query_layers: tuple = (128, 64, 32)
    conv_channels: tuple = (256, 128, 64)
    post_layers: tuple = (32, 16)
    layer_norm: bool = True
    conv_bias: bool = True
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        self.query_layers = tuple(self.query_layers)
        self.conv_channels = tuple(self.conv_channels)
        self.post_layers = tuple(self.post_layers)
        if not self.query_layers or not self.conv_channels:
            raise ConfigError("the query stack and the convolution stack need at least one layer")
        if min(self.query_layers + self.conv_channels + self.post_layers + (self.query_width, self.node_width)) <= 0:
            raise ConfigError("layer widths must be positive")


@dataclass
class Batch:
    q: np.ndarray       # (B, query_width)
    x: np.ndarray       # (N, node_width)
    left: np.ndarray
    right: np.ndarray
    starts: np.ndarray  # first node row of each sample
    seg: np.ndarray     # sample index of each node row


def make_batch(pairs: Sequence[tuple[np.ndarray, PlanVecTree]]) -> Batch:
    qs, xs, ls, rs, starts, seg = [], [], [], [], [], []
    off = 0
    for b, (qv, t) in enumerate(pairs):
        n = len(t)
        qs.append(qv)
        xs.append(t.vectors)
        ls.append(np.where(t.left >= 0, t.left + off, -1))
        rs.append(np.where(t.right >= 0, t.right + off, -1))
        starts.append(off)
        seg.append(np.full(n, b))
        off += n
    return Batch(np.vstack(qs), np.vstack(xs), np.concatenate(ls), np.concatenate(rs),
                 np.asarray(starts), np.concatenate(seg))


class ValueNet:
    def __init__(self, config: NetConfig, params: dict | None = None):
        self.config = c = config
        self.query_stack = []
        width = c.query_width
        for i, w in enumerate(c.query_layers):
            self.query_stack.append(nn.DenseLayer(f"q{i}", width, w, c.layer_norm, True))
            width = w
        self.convs = []
        cin = c.node_width + c.query_layers[-1]
        for i, w in enumerate(c.conv_channels):
            self.convs.append(nn.TreeConvLayer(f"conv{i}", cin, w, c.conv_bias, True))
            cin = w
        self.post_stack = []
        for i, w in enumerate(c.post_layers):
            self.post_stack.append(nn.DenseLayer(f"post{i}", cin, w, c.layer_norm, True))
            cin = w
        self.post_stack.append(nn.DenseLayer("out", cin, 1, False, False))
        if params is None:
            rng = np.random.default_rng(c.seed)
            params = {}
            for layer in self.query_stack + self.convs + self.post_stack:
                layer.init(params, rng)
        self.params = params
        self.adam = nn.AdamState(lr=c.lr)
        self.shift: float | None = None
        self.scale: float = 1.0
        self.trained = False

    # ---- normalization of targets
    def fit_normalizer(self, targets: np.ndarray) -> None:
        self.shift = float(np.mean(targets))
        std = float(np.std(targets))
        self.scale = std if std > 1e-6 else 1.0

    def _norm(self, t):
        return (t - (self.shift or 0.0)) / self.scale

    def _denorm(self, y):
        return y * self.scale + (self.shift or 0.0)

    # ---- forward / backward
    def forward(self, batch: Batch, params: dict | None = None):
        params = self.params if params is None else params
        caches = []
        g = batch.q
        for layer in self.query_stack:
            g, c = layer.forward(params, g)
            caches.append(c)
        h = np.hstack([batch.x, g[batch.seg]])
        for layer in self.convs:
            h, c = layer.forward(params, h, batch.left, batch.right)
            caches.append(c)
        pooled, arg = nn.dynamic_pool(h, batch.starts)
        caches.append((arg, len(h)))
        y = pooled
        for layer in self.post_stack:
            y, c = layer.forward(params, y)
            caches.append(c)
        return y[:, 0], caches

    def backward(self, dy: np.ndarray, caches, batch: Batch, params: dict | None = None) -> dict:
        params = self.params if params is None else params
        grads: dict = {}
        nq, nc = len(self.query_stack), len(self.convs)
        d = dy[:, None]
        for layer, c in zip(reversed(self.post_stack), reversed(caches[nq + nc + 1:])):
            d, g = layer.backward(params, d, c)
            grads.update(g)
        arg, n = caches[nq + nc]
        d = nn.dynamic_pool_backward(d, arg, n)
        for layer, c in zip(reversed(self.convs), reversed(caches[nq:nq + nc])):
            d, g = layer.backward(params, d, c)
            grads.update(g)
        dg = np.add.reduceat(d[:, self.config.node_width:], batch.starts, axis=0)
        for layer, c in zip(reversed(self.query_stack), reversed(caches[:nq])):
            dg, g = layer.backward(params, dg, c)
            grads.update(g)
        return grads

    def loss_and_grads(self, batch: Batch, targets_norm: np.ndarray, params: dict | None = None):
        y, caches = self.forward(batch, params)
        err = y - targets_norm
        loss = float(np.mean(err ** 2))
        grads = self.backward(2.0 * err / len(err), caches, batch, params)
        return loss, grads

    # ---- inference
    def predict_batch(self, pairs: Sequence[tuple[np.ndarray, PlanVecTree]]) -> np.ndarray:
        y, _ = self.forward(make_batch(pairs))
        return self._denorm(y)

    def predict(self, qvec: np.ndarray, ptree: PlanVecTree) -> float:
        if qvec.shape != (self.config.query_width,) or ptree.vectors.shape[1] != self.config.node_width:
            raise nn.ShapeError("inputs do not match the network's encoding widths")
        return float(self.predict_batch([(qvec, ptree)])[0])

    def snapshot(self) -> "ValueNet":
        """A copy whose parameters are frozen against later training."""
        other = ValueNet(self.config, {k: v.copy() for k, v in self.params.items()})
        other.shift, other.scale, other.trained = self.shift, self.scale, self.trained
        return other

    def evaluator(self, qvec: np.ndarray, featurizer: Featurizer) -> "PlanScorer":
        return PlanScorer(self, qvec, featurizer)


class PlanScorer:
    """Scores many partial plans of one query against fixed parameters.

    A node's convolution outputs depend only on its own subtree (and the
    query vector), so they are memoized by subtree key; each child plan
    generated during search then costs only its new nodes.  Results equal
    :meth:`ValueNet.predict` up to floating-point summation order.
    """

    def __init__(self, net: ValueNet, qvec: np.ndarray, featurizer: Featurizer):
        self.net = net
        p = net.params
        nw = net.config.node_width
        self.nj = len(featurizer.join_ops)
        self.op_pos = {op: i for i, op in enumerate(featurizer.join_ops)}
        self.rel_pos = {r: i for i, r in enumerate(featurizer.relations)}
        self.nw = nw
        g = qvec[None, :]
        for layer in net.query_stack:
            g, _ = layer.forward(p, g)
        g = g[0]
        self.layers = []
        for k, layer in enumerate(net.convs):
            W = p[f"{layer.name}.W"]
            b = p.get(f"{layer.name}.b") if layer.bias else None
            b = np.zeros(W.shape[2]) if b is None else b
            if k == 0:
                gp, gc = g @ W[0, nw:], g @ W[1, nw:] + g @ W[2, nw:]
                W = W[:, :nw]
                self.layers.append((W, b + gp, b + gp + gc))
            else:
                self.layers.append((W, b, b))
        # per-subtree rows: bufs[0] raw node vector, bufs[k] output of conv k,
        # bufs[-1] channel max of the last conv over the whole subtree
        widths = [nw] + [W.shape[2] for W, _, _ in self.layers] + [self.layers[-1][0].shape[2]]
        self.bufs = [np.zeros((256, w)) for w in widths]
        self.row: dict[str, int] = {}
        self.height: dict[str, int] = {}
        self.calls = 0

    def _grow(self, need: int) -> None:
        cap = len(self.bufs[0])
        if need <= cap:
            return
        while cap < need:
            cap *= 2
        self.bufs = [np.vstack([b, np.zeros((cap - len(b), b.shape[1]))]) for b in self.bufs]

    def _leaf_x(self, node) -> np.ndarray:
        x = np.zeros(self.nw)
        base = self.nj + 2 * self.rel_pos[node.rel]
        if node.kind != "index":
            x[base] = 1.0
        if node.kind != "table":
            x[base + 1] = 1.0
        return x

    def _fill(self, plans: Sequence[PlanForest]) -> None:
        levels: dict[int, list] = {}
        height = self.height

        def visit(node) -> int:
            h = height.get(node.key)
            if h is not None:
                return h
            h = 1 + max(visit(node.left), visit(node.right)) if node.is_join else 0
            height[node.key] = h
            levels.setdefault(h, []).append(node)
            return h

        for plan in plans:
            for t in plan.roots:
                visit(t)
        n0 = len(self.row)
        self._grow(n0 + sum(len(v) for v in levels.values()))
        bufs, nj = self.bufs, self.nj
        for h in sorted(levels):
            nodes = levels[h]
            lo = len(self.row)
            rows = np.arange(lo, lo + len(nodes))
            for i, n in enumerate(nodes):
                self.row[n.key] = lo + i
            if h == 0:
                cur = np.vstack([self._leaf_x(n) for n in nodes])
                bufs[0][rows] = cur
                for k, (W, b_leaf, _) in enumerate(self.layers):
                    cur = nn.leaky_relu(cur @ W[0] + b_leaf)
                    bufs[k + 1][rows] = cur
                bufs[-1][rows] = cur
                continue
            li = np.fromiter((self.row[n.left.key] for n in nodes), np.int64, len(nodes))
            ri = np.fromiter((self.row[n.right.key] for n in nodes), np.int64, len(nodes))
            cur = np.zeros((len(nodes), self.nw))
            cur[np.arange(len(nodes)), [self.op_pos[n.op] for n in nodes]] = 1.0
            cur[:, nj:] = np.maximum(bufs[0][li, nj:], bufs[0][ri, nj:])
            bufs[0][rows] = cur
            for k, (W, _, b_join) in enumerate(self.layers):
                cur = nn.leaky_relu(cur @ W[0] + bufs[k][li] @ W[1] + bufs[k][ri] @ W[2] + b_join)
                bufs[k + 1][rows] = cur
            bufs[-1][rows] = np.maximum(cur, np.maximum(bufs[-1][li], bufs[-1][ri]))

    def __call__(self, plans: Sequence[PlanForest]) -> np.ndarray:
        """Predicted transformed cost of each plan."""
        self.calls += len(plans)
        self._fill(plans)
        idx, starts = [], []
        for plan in plans:
            starts.append(len(idx))
            idx.extend(self.row[t.key] for t in plan.roots)
        y = np.maximum.reduceat(self.bufs[-1][idx], starts, axis=0)
        for layer in self.net.post_stack:
            y, _ = layer.forward(self.net.params, y)
        return self.net._denorm(y[:, 0])


# --------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    steps: int = 300
    batch: int = 16
    seed: int = 0


def train(net: ValueNet, samples: Sequence[Sample], steps: int = 300, batch: int = 16,
          seed: int = 0, final_lr: float = 1.0) -> list[float]:
    """``steps`` Adam minibatch steps on mean squared error; returns per-step loss.

    The step size follows a half cosine from the configured rate down to
    ``final_lr`` times it (1.0 keeps it constant).
    """
    if not samples:
        raise ContractError("training needs at least one sample")
    if any(s.qvec is None or s.ptree is None for s in samples):
        raise ContractError("samples must be encoded before training")
    targets = np.array([s.target for s in samples])
    if net.shift is None:
        net.fit_normalizer(targets)
    tn = net._norm(targets)
    rng = np.random.default_rng(seed)
    n = len(samples)
    losses = []
    order = rng.permutation(n)
    pos = 0
    base = net.adam.lr
    for i in range(steps):
        frac = i / (steps - 1) if steps > 1 else 0.0
        net.adam.lr = base * (final_lr + (1.0 - final_lr) * 0.5 * (1.0 + math.cos(math.pi * frac)))
        if pos + batch > n and pos > 0:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos:pos + batch]
        pos += batch
        b = make_batch([(samples[i].qvec, samples[i].ptree) for i in idx])
        loss, grads = net.loss_and_grads(b, tn[idx])
        nn.adam_step(net.params, grads, net.adam)
        losses.append(loss)
    net.adam.lr = base
    if steps:
        net.trained = True
    return losses


# --------------------------------------------------------------------------
# persistence

def save_net(path, net: ValueNet, manifest: dict) -> None:
    extra = dict(manifest)
    extra["net_config"] = asdict(net.config)
    extra["normalizer"] = {"shift": net.shift, "scale": net.scale, "trained": net.trained}
    nn.save_checkpoint(path, net.params, net.adam, extra)


def load_net(path, expect: dict | None = None) -> tuple[ValueNet, dict]:
    """Load a network; every key in ``expect`` must match the stored manifest."""
    try:
        params, adam, extra = nn.load_checkpoint(path)
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"unreadable checkpoint {path}: {exc}") from exc
    for k, v in (expect or {}).items():
        if extra.get(k) != v:
            raise IntegrityError(f"checkpoint {k} is {extra.get(k)!r}, expected {v!r}")
    try:
        net = ValueNet(NetConfig(**extra["net_config"]), params)
    except (KeyError, TypeError) as exc:
        raise IntegrityError(f"checkpoint manifest is incomplete: {exc}") from exc
    if set(params) != set(ValueNet(net.config, None).params):
        raise IntegrityError("checkpoint parameters do not match the network layout")
    if adam is not None:
        net.adam = adam
    norm = extra.get("normalizer", {})
    net.shift, net.scale, net.trained = norm.get("shift"), norm.get("scale", 1.0), norm.get("trained", False)
    return net, extra
