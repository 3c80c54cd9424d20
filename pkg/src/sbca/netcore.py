"""Reverse-mode differentiation over numpy arrays, plus the layers the policy uses.

Every node of the graph is a :class:`Value` wrapping an ``ndarray`` (0-d for
scalars).  Operations record their parents and a closure that pushes the
upstream gradient back; :func:`backward` walks the graph once in reverse
topological order.

The layer functions take a :class:`ParamSet` and work on a single vector or on
a ``(batch, features)`` matrix, so one training episode is a single graph.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from scipy import special

from .errors import ConstructionError, GraphError, NumericError, ParameterError, SizeError

__all__ = [
    "Value",
    "backward",
    "relu",
    "tanh",
    "exp",
    "log",
    "sum_",
    "mean",
    "concat",
    "clamp_min",
    "gammaln",
    "softmax",
    "linear",
    "affine",
    "layer_norm",
    "encode_price",
    "encode_text",
    "gated_fusion",
    "concat_fusion",
    "FusionConfig",
    "ParamSet",
    "init_uniform",
    "AdamW",
    "clip_grad_norm",
    "save_checkpoint",
    "load_checkpoint",
    "linear_equivalence_params",
    "mixed_partial_statistic",
    "gated_probe",
    "concat_probe",
    "second_order_fit",
]


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Value:
    """A node in the differentiation graph."""

    __slots__ = ("data", "grad", "_parents", "_backward", "name")

    def __init__(self, data, parents: tuple = (), backward_fn: Callable | None = None, name: str | None = None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self._parents = tuple(parents)
        self._backward = backward_fn
        self.name = name

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Value{label}(shape={self.data.shape})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        g = _unbroadcast(np.asarray(g), self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        other = _lift(other)

        def _bw(g):
            self._accumulate(g)
            other._accumulate(g)

        return Value(self.data + other.data, (self, other), _bw)

    __radd__ = __add__

    def __neg__(self):
        return Value(-self.data, (self,), lambda g: self._accumulate(-g))

    def __sub__(self, other):
        return self + (-_lift(other))

    def __rsub__(self, other):
        return _lift(other) + (-self)

    def __mul__(self, other):
        other = _lift(other)

        def _bw(g):
            self._accumulate(g * other.data)
            other._accumulate(g * self.data)

        return Value(self.data * other.data, (self, other), _bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other)
        return self * other ** -1.0

    def __rtruediv__(self, other):
        return _lift(other) * self ** -1.0

    def __pow__(self, exponent: float):
        if isinstance(exponent, Value):
            raise TypeError("only constant exponents are supported")
        out = self.data ** exponent

        def _bw(g):
            self._accumulate(g * exponent * self.data ** (exponent - 1.0))

        return Value(out, (self,), _bw)


def _lift(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


# elementwise ops ----------------------------------------------------------

def relu(x: Value) -> Value:
    x = _lift(x)
    mask = x.data > 0
    return Value(np.where(mask, x.data, 0.0), (x,), lambda g: x._accumulate(g * mask))


def tanh(x: Value) -> Value:
    x = _lift(x)
    out = np.tanh(x.data)
    return Value(out, (x,), lambda g: x._accumulate(g * (1.0 - out * out)))


def exp(x: Value) -> Value:
    x = _lift(x)
    out = np.exp(x.data)
    return Value(out, (x,), lambda g: x._accumulate(g * out))


def log(x: Value) -> Value:
    x = _lift(x)
    return Value(np.log(x.data), (x,), lambda g: x._accumulate(g / x.data))


def gammaln(x: Value) -> Value:
    x = _lift(x)
    return Value(special.gammaln(x.data), (x,), lambda g: x._accumulate(g * special.digamma(x.data)))


def clamp_min(x: Value, lo: float) -> Value:
    """max(x, lo) elementwise; the gradient is cut where the floor is active."""
    x = _lift(x)
    mask = x.data >= lo
    return Value(np.where(mask, x.data, lo), (x,), lambda g: x._accumulate(g * mask))


# reductions / shape ---------------------------------------------------------

def sum_(x: Value, axis=None, keepdims: bool = False) -> Value:
    x = _lift(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.data.shape))

    return Value(out, (x,), _bw)


def mean(x: Value, axis=None, keepdims: bool = False) -> Value:
    x = _lift(x)
    n = x.data.size if axis is None else x.data.shape[axis]
    return sum_(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def concat(xs: Iterable[Value], axis: int = -1) -> Value:
    xs = [_lift(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    sizes = [x.data.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def _bw(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            x._accumulate(np.take(g, np.arange(lo, hi), axis=axis))

    return Value(out, tuple(xs), _bw)


def softmax(x: Value, axis: int = -1) -> Value:
    """Max-shifted softmax along ``axis``."""
    x = _lift(x)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax received non-finite logits")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        x._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return Value(out, (x,), _bw)


def linear(x: Value, W: Value, b: Value | None = None) -> Value:
    """``x @ W.T + b`` for ``x`` of shape (D,) or (batch, D) and ``W`` of shape (H, D)."""
    x, W = _lift(x), _lift(W)
    if W.data.ndim != 2 or x.data.shape[-1] != W.data.shape[1]:
        raise SizeError(f"linear: input {x.data.shape} incompatible with weight {W.data.shape}")
    if b is not None:
        b = _lift(b)
        if b.data.shape != (W.data.shape[0],):
            raise SizeError(f"linear: bias {b.data.shape} incompatible with weight {W.data.shape}")
    out = x.data @ W.data.T
    if b is not None:
        out = out + b.data

    def _bw(g):
        x._accumulate(g @ W.data)
        if x.data.ndim == 1:
            W._accumulate(np.outer(g, x.data))
        else:
            W._accumulate(g.T @ x.data)
        if b is not None:
            b._accumulate(g if g.ndim == 1 else g.sum(axis=0))

    parents = (x, W) if b is None else (x, W, b)
    return Value(out, parents, _bw)


def affine(W, b, x) -> Value:
    return linear(x, W, b)


def layer_norm(x: Value, gamma=None, beta=None, eps: float = 1e-5, bypass: bool = False) -> Value:
    """Normalize over the last axis with population variance, then scale and shift.

    ``bypass=True`` returns ``x`` untouched; only the expressiveness harness uses it.
    """
    x = _lift(x)
    if bypass:
        return x
    if x.data.shape[-1] < 2:
        raise SizeError("layer_norm needs at least 2 features on the normalized axis")
    mu = mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = mean(centered * centered, axis=-1, keepdims=True)
    out = centered * (var + eps) ** -0.5
    if gamma is not None:
        out = out * gamma
    if beta is not None:
        out = out + beta
    return out


# -----------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class FusionConfig:
    hidden: int = 64
    layernorm_bypass: bool = False
    fusion_mode: str = "gated"
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.hidden < 1:
            raise ParameterError("hidden size must be >= 1")
        if self.fusion_mode not in ("gated", "concat"):
            raise ParameterError(f"unknown fusion_mode {self.fusion_mode!r}")


class ParamSet:
    """Named collection of trainable arrays."""

    def __init__(self, arrays: dict[str, np.ndarray] | None = None):
        self._values: dict[str, Value] = {}
        for name, arr in (arrays or {}).items():
            self[name] = arr

    def __setitem__(self, name: str, arr) -> None:
        self._values[name] = Value(np.array(arr, dtype=np.float64, copy=True), name=name)

    def __getitem__(self, name: str) -> Value:
        return self._values[name]

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __iter__(self):
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def names(self) -> list[str]:
        return list(self._values)

    def items(self):
        return self._values.items()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._values.items()}

    def zero_grad(self) -> None:
        for v in self._values.values():
            v.zero_grad()

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (v.grad if v.grad is not None else np.zeros_like(v.data)) for k, v in self._values.items()}

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.data for k, v in self._values.items()})

    @property
    def size(self) -> int:
        return sum(v.data.size for v in self._values.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([v.data.ravel() for v in self._values.values()])

    def flat_grad(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.grads().values()])

    def set_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size:
            raise SizeError(f"expected {self.size} values, got {vec.size}")
        pos = 0
        for v in self._values.values():
            n = v.data.size
            v.data = vec[pos:pos + n].reshape(v.data.shape).copy()
            pos += n

    def to_dict(self) -> dict:
        return {k: {"shape": list(v.data.shape), "data": v.data.ravel().tolist()} for k, v in self._values.items()}

    @classmethod
    def from_dict(cls, payload: dict) -> "ParamSet":
        return cls({k: np.asarray(e["data"], dtype=np.float64).reshape(e["shape"]) for k, e in payload.items()})


def init_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


CHECKPOINT_FORMAT = "sbca-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: ParamSet, meta: dict) -> None:
    payload = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "meta": meta, "params": params.to_dict()}
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_checkpoint(path) -> tuple[ParamSet, dict]:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    return ParamSet.from_dict(payload["params"]), payload["meta"]


# -----------------------------------------------------------------------------
# backward pass and optimizer


def _toposort(root: Value) -> list[Value]:
    order: list[Value] = []
    state: dict[int, int] = {}  # 0 = on current path, 1 = finished
    stack: list[tuple[Value, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 1
            order.append(node)
            continue
        seen = state.get(key)
        if seen == 1:
            continue
        if seen == 0:
            raise GraphError("cycle detected in differentiation graph")
        state[key] = 0
        stack.append((node, True))
        for parent in node._parents:
            if state.get(id(parent)) != 1:
                stack.append((parent, False))
    return order


def backward(loss: Value) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every node reachable from ``loss``."""
    if loss.data.size != 1:
        raise SizeError("backward() requires a scalar loss")
    order = _toposort(loss)
    # interior nodes are rebuilt every forward pass; only leaves accumulate
    for node in order:
        if node._parents:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def clip_grad_norm(params: ParamSet, max_norm: float) -> float:
    grads = params.grads()
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for v in params._values.values():
            if v.grad is not None:
                v.grad = v.grad * scale
    return total


class AdamW:
    """Adaptive moment estimation with decoupled weight decay."""

    def __init__(self, params: ParamSet, lr: float = 3e-4, weight_decay: float = 1e-5,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            p.data = p.data * (1.0 - self.lr * self.weight_decay) - self.lr * update


# -----------------------------------------------------------------------------
# encoders and fusion


def _encode(params: ParamSet, tag: str, x, cfg: FusionConfig) -> Value:
    pre = affine(params[f"W_{tag}"], params[f"b_{tag}"], x)
    if cfg.layernorm_bypass:
        normed = pre
    else:
        normed = layer_norm(pre, params[f"gamma_{tag}"], params[f"beta_{tag}"], eps=cfg.ln_eps)
    return relu(normed)


def encode_price(params: ParamSet, p, cfg: FusionConfig = FusionConfig()) -> Value:
    """ReLU(LayerNorm(W_p p + b_p))."""
    return _encode(params, "p", p, cfg)


def encode_text(params: ParamSet, s, cfg: FusionConfig = FusionConfig()) -> Value:
    """ReLU(LayerNorm(W_s s + b_s))."""
    return _encode(params, "s", s, cfg)


def gated_fusion(params: ParamSet, f_p, f_s) -> Value:
    """ReLU(W_f (f_p * (1 + g) + f_s) + b_f) with g = tanh(W_g f_s + b_g)."""
    f_p, f_s = _lift(f_p), _lift(f_s)
    if f_p.shape != f_s.shape:
        raise SizeError(f"gated_fusion: stream shapes differ {f_p.shape} vs {f_s.shape}")
    g = tanh(affine(params["W_g"], params["b_g"], f_s))
    return relu(affine(params["W_f"], params["b_f"], f_p * (1.0 + g) + f_s))


def concat_fusion(params: ParamSet, p, s) -> Value:
    """Affine map of the concatenated streams: W_concat [p; s] + b_concat."""
    return affine(params["W_concat"], params["b_concat"], concat([_lift(p), _lift(s)], axis=-1))


# -----------------------------------------------------------------------------
# expressiveness harness


def linear_equivalence_params(W_concat, b_concat, n_price: int, low: float, high: float,
                              n_samples: int = 100, seed: int = 0) -> tuple[ParamSet, float]:
    """Build gated-fusion parameters that reproduce ``W_concat [p; s] + b_concat``.

    The gate is zeroed, LayerNorm bypassed, the encoders take the two column
    blocks of ``W_concat`` and the fusion layer is the identity shifted by
    ``b_concat``.  Inputs are drawn uniformly from ``[low, high]``; every ReLU
    preactivation must be nonnegative there, otherwise ``ConstructionError``.

    Returns the parameters and the sup-norm deviation between both maps.
    """
    W = np.asarray(W_concat, dtype=np.float64)
    b = np.asarray(b_concat, dtype=np.float64)
    H, D = W.shape
    if not 0 < n_price < D or b.shape != (H,):
        raise SizeError("inconsistent W_concat / b_concat / n_price")
    n_text = D - n_price
    params = ParamSet({
        "W_p": W[:, :n_price], "b_p": np.zeros(H),
        "W_s": W[:, n_price:], "b_s": np.zeros(H),
        "W_g": np.zeros((H, H)), "b_g": np.zeros(H),
        "W_f": np.eye(H), "b_f": b,
        "W_concat": W, "b_concat": b,
    })
    cfg = FusionConfig(hidden=H, layernorm_bypass=True)
    rng = np.random.default_rng(seed)
    p = rng.uniform(low, high, size=(n_samples, n_price))
    s = rng.uniform(low, high, size=(n_samples, n_text))

    pre_p = p @ params["W_p"].data.T
    pre_s = s @ params["W_s"].data.T
    pre_f = pre_p + pre_s + b
    if (pre_p < 0).any() or (pre_s < 0).any() or (pre_f < 0).any():
        raise ConstructionError("region produces negative ReLU preactivations")

    gated = gated_fusion(params, encode_price(params, p, cfg), encode_text(params, s, cfg)).data
    linear_map = concat_fusion(params, p, s).data
    return params, float(np.max(np.abs(gated - linear_map)))


PROBE_PARAMS = {
    "W_p": [[1.0]], "b_p": [2.0],
    "W_s": [[1.0]], "b_s": [2.0],
    "W_g": [[1.0]], "b_g": [-2.0],
    "W_f": [[1.0]], "b_f": [0.0],
}


def gated_probe(params: dict | None = None) -> Callable[[float, float], float]:
    """Scalar gated-fusion map (H = 1, LayerNorm bypassed).

    With the default parameters both encoders stay in the ReLU-positive regime
    on [-1, 1] and the gate reduces to tanh(s).
    """
    ps = ParamSet(params or PROBE_PARAMS)
    cfg = FusionConfig(hidden=1, layernorm_bypass=True)

    def f(p: float, s: float) -> float:
        fp = encode_price(ps, np.array([p]), cfg)
        fs = encode_text(ps, np.array([s]), cfg)
        return float(gated_fusion(ps, fp, fs).data[0])

    return f


def concat_probe(w_p: float = 0.5, w_s: float = 0.25, b: float = 0.125) -> Callable[[float, float], float]:
    ps = ParamSet({"W_concat": [[w_p, w_s]], "b_concat": [b]})

    def f(p: float, s: float) -> float:
        return float(concat_fusion(ps, np.array([p]), np.array([s])).data[0])

    return f


def mixed_partial_statistic(fn: Callable[[float, float], float], step: float = 1e-3,
                            grid: int = 21, low: float = -1.0, high: float = 1.0) -> float:
    """Max |d2 f / dp ds| by central differences over a ``grid x grid`` lattice.

    Round-off grows like eps / step**2; the default step keeps it near 1e-9
    for O(1) affine maps while the truncation error on smooth maps stays O(step**2).
    """
    h = step
    best = 0.0
    for p in np.linspace(low, high, grid):
        for s in np.linspace(low, high, grid):
            mixed = (fn(p + h, s + h) - fn(p + h, s - h) - fn(p - h, s + h) + fn(p - h, s - h)) / (4 * h * h)
            best = max(best, abs(mixed))
    return best


def second_order_fit(fn: Callable[[float, float], float], radius: float = 0.1, grid: int = 21) -> tuple[float, float]:
    """Fit D(p, s) = f(p,s) - f(p,0) - f(0,s) + f(0,0) against c * p * s.

    Returns ``(c, r_squared)``.
    """
    axis = np.linspace(-radius, radius, grid)
    f00 = fn(0.0, 0.0)
    d, x = [], []
    for p in axis:
        fp0 = fn(p, 0.0)
        for s in axis:
            d.append(fn(p, s) - fp0 - fn(0.0, s) + f00)
            x.append(p * s)
    d, x = np.asarray(d), np.asarray(x)
    c = float(d @ x / (x @ x))
    ss_res = float(np.sum((d - c * x) ** 2))
    ss_tot = float(np.sum((d - d.mean()) ** 2))
    return c, 1.0 - ss_res / ss_tot
