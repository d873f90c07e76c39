"""Minimal numpy network pieces: dense + layer norm, tree convolution, dynamic pooling, Adam.

Parameters live in a flat ``dict[str, np.ndarray]``; layers are stateless
descriptions that read from it.  Every forward returns a cache consumed by
the matching backward.

Trees are passed flattened: ``X`` holds one row per node, ``left`` and
``right`` give child row indices (-1 for a missing child) and ``starts``
marks where each sample's nodes begin (nodes of one sample are contiguous).
"""
from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import dataclass, field

import numpy as np

SLOPE = 0.01
LN_EPS = 1e-10
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


def leaky_relu(x: np.ndarray) -> np.ndarray:
    # equals where(x > 0, x, SLOPE * x) because 0 < SLOPE < 1
    return np.maximum(x, SLOPE * x)


def leaky_relu_grad(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, 1.0, SLOPE)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# --------------------------------------------------------------------------
# dense

@dataclass
class DenseLayer:
    name: str
    n_in: int
    n_out: int
    layer_norm: bool = True
    activation: bool = True

    def init(self, params: dict, rng: np.random.Generator) -> None:
        params[f"{self.name}.W"] = glorot(rng, self.n_in, self.n_out, (self.n_in, self.n_out))
        params[f"{self.name}.b"] = np.zeros(self.n_out)
        if self.layer_norm:
            params[f"{self.name}.gain"] = np.ones(self.n_out)
            params[f"{self.name}.shift"] = np.zeros(self.n_out)

    def forward(self, params: dict, x: np.ndarray):
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"{self.name}: expected width {self.n_in}, got {x.shape[-1]}")
        h = x @ params[f"{self.name}.W"] + params[f"{self.name}.b"]
        xhat = std = None
        z = h
        if self.layer_norm:
            mu = h.mean(axis=-1, keepdims=True)
            std = np.sqrt(h.var(axis=-1, keepdims=True) + LN_EPS)
            xhat = (h - mu) / std
            z = params[f"{self.name}.gain"] * xhat + params[f"{self.name}.shift"]
        y = leaky_relu(z) if self.activation else z
        return y, (x, z, xhat, std)

    def backward(self, params: dict, dy: np.ndarray, cache):
        x, z, xhat, std = cache
        grads = {}
        dz = dy * leaky_relu_grad(z) if self.activation else dy
        if self.layer_norm:
            grads[f"{self.name}.gain"] = (dz * xhat).sum(axis=0)
            grads[f"{self.name}.shift"] = dz.sum(axis=0)
            dxhat = dz * params[f"{self.name}.gain"]
            dh = (dxhat - dxhat.mean(axis=-1, keepdims=True)
                  - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) / std
        else:
            dh = dz
        grads[f"{self.name}.W"] = x.T @ dh
        grads[f"{self.name}.b"] = dh.sum(axis=0)
        return dh @ params[f"{self.name}.W"].T, grads


def dense_forward(x: np.ndarray, layer: DenseLayer, params: dict) -> np.ndarray:
    y, _ = layer.forward(params, np.atleast_2d(x))
    return y[0] if np.ndim(x) == 1 else y


# --------------------------------------------------------------------------
# tree convolution

@dataclass
class Filterbank:
    """``weights[0]``, ``[1]``, ``[2]`` weigh parent, left child and right child."""

    weights: np.ndarray  # (3, c_in, c_out)
    bias: np.ndarray     # (c_out,)

    def __post_init__(self):
        if self.weights.ndim != 3 or self.weights.shape[0] != 3:
            raise ShapeError("filterbank weights must be 3 x c_in x c_out")
        if self.bias.shape != (self.weights.shape[2],):
            raise ShapeError("filterbank bias must have c_out entries")


def _gather_children(x: np.ndarray, left: np.ndarray, right: np.ndarray) -> np.ndarray:
    pad = np.vstack([x, np.zeros((1, x.shape[1]))])
    n = len(x)
    li = np.where(left < 0, n, left)
    ri = np.where(right < 0, n, right)
    return np.hstack([x, pad[li], pad[ri]])


def tree_conv(x: np.ndarray, left: np.ndarray, right: np.ndarray, bank: Filterbank,
              activation: bool = True) -> np.ndarray:
    """One filterbank slid over every (parent, left, right) triangle; missing children are zeros."""
    out, _ = tree_conv_forward(x, left, right, bank.weights, bank.bias, activation)
    return out


def tree_conv_forward(x, left, right, weights, bias, activation=True):
    c_in = weights.shape[1]
    if x.shape[1] != c_in:
        raise ShapeError(f"tree conv expects {c_in} channels, got {x.shape[1]}")
    h = _gather_children(x, left, right)
    z = h @ weights.reshape(3 * c_in, -1)
    if bias is not None:
        z = z + bias
    out = leaky_relu(z) if activation else z
    return out, (h, z, left, right)


def tree_conv_backward(dout, weights, cache, activation=True):
    h, z, left, right = cache
    c_in = weights.shape[1]
    dz = dout * leaky_relu_grad(z) if activation else dout
    dW = (h.T @ dz).reshape(weights.shape)
    db = dz.sum(axis=0)
    dh = dz @ weights.reshape(3 * c_in, -1).T
    n = len(h)
    dpad = np.zeros((n + 1, c_in))
    dpad[:n] = dh[:, :c_in]
    # every node has at most one parent, so only the padding row repeats
    dpad[np.where(left < 0, n, left)] += dh[:, c_in:2 * c_in]
    dpad[np.where(right < 0, n, right)] += dh[:, 2 * c_in:]
    return dpad[:n], dW, db


@dataclass
class TreeConvLayer:
    name: str
    c_in: int
    c_out: int
    bias: bool = True
    activation: bool = True

    def init(self, params: dict, rng: np.random.Generator) -> None:
        params[f"{self.name}.W"] = glorot(rng, 3 * self.c_in, self.c_out, (3, self.c_in, self.c_out))
        if self.bias:
            params[f"{self.name}.b"] = np.zeros(self.c_out)

    def forward(self, params, x, left, right):
        return tree_conv_forward(x, left, right, params[f"{self.name}.W"],
                                 params.get(f"{self.name}.b") if self.bias else None, self.activation)

    def backward(self, params, dout, cache):
        dx, dW, db = tree_conv_backward(dout, params[f"{self.name}.W"], cache, self.activation)
        grads = {f"{self.name}.W": dW}
        if self.bias:
            grads[f"{self.name}.b"] = db
        return dx, grads


# --------------------------------------------------------------------------
# pooling

def dynamic_pool(x: np.ndarray, starts: np.ndarray | None = None):
    """Channel-wise max over each sample's nodes.

    Returns ``(pooled, argmax)``; ``argmax[b, c]`` is the first node index
    attaining the maximum, which is where the gradient is routed.
    """
    if len(x) == 0:
        raise ValueError("cannot pool an empty forest")
    if starts is None:
        starts = np.zeros(1, dtype=np.int64)
    pooled = np.maximum.reduceat(x, starts, axis=0)
    seg = np.repeat(np.arange(len(starts)), np.diff(np.append(starts, len(x))))
    idx = np.arange(len(x))[:, None]
    cand = np.where(x == pooled[seg], idx, len(x))
    arg = np.minimum.reduceat(cand, starts, axis=0)
    return pooled, arg


def dynamic_pool_backward(dpooled: np.ndarray, arg: np.ndarray, n_nodes: int) -> np.ndarray:
    dx = np.zeros((n_nodes, dpooled.shape[1]))
    cols = np.broadcast_to(np.arange(dpooled.shape[1]), arg.shape)
    dx[arg, cols] = dpooled
    return dx


# --------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """In-place bias-corrected Adam update of every parameter that has a gradient."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for k, g in grads.items():
        p = params[k]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        denom = np.sqrt(v)
        denom *= 1.0 / math.sqrt(bc2)
        denom += state.epsilon
        p -= (state.lr / bc1) * m / denom


# --------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, params: dict, adam: AdamState | None = None, extra: dict | None = None) -> None:
    arrays = {f"p/{k}": v for k, v in params.items()}
    manifest = {"version": CHECKPOINT_VERSION,
                "shapes": {k: list(v.shape) for k, v in params.items()},
                "extra": extra or {}}
    if adam is not None:
        manifest["adam"] = {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
                            "epsilon": adam.epsilon, "step": adam.step}
        arrays.update({f"m/{k}": v for k, v in adam.m.items()})
        arrays.update({f"v/{k}": v for k, v in adam.v.items()})
    arrays["manifest"] = np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    # npz layout written by hand with a fixed entry timestamp, so equal
    # parameters give byte-identical files
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            arr = io.BytesIO()
            np.lib.format.write_array(arr, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), arr.getvalue())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as data:
        manifest = json.loads(bytes(data["manifest"]).decode())
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
        params = {k[2:]: data[k].copy() for k in data.files if k.startswith("p/")}
        for k, shape in manifest["shapes"].items():
            if list(params[k].shape) != shape:
                raise ShapeError(f"checkpoint entry {k} does not match its manifest shape")
        adam = None
        if "adam" in manifest:
            adam = AdamState(**manifest["adam"])
            adam.m = {k[2:]: data[k].copy() for k in data.files if k.startswith("m/")}
            adam.v = {k[2:]: data[k].copy() for k in data.files if k.startswith("v/")}
    return params, adam, manifest.get("extra", {})
