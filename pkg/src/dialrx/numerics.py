"""Reverse-mode automatic differentiation over dense float64 tensors.

Define-by-run: every forward op returns a Tensor that records its op name,
parent tensors, and a vector-Jacobian-product closure. ``backward`` replays
the recorded graph in reverse topological order. The op set is exactly what
the sequence model needs; tensors are dense, row-major, rank <= 3, and there
is no general broadcasting (``add``/``multiply`` accept a rank-1 right side
as an explicit bias/gain case, nothing more).
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DisconnectedGraph, NonFinite, ShapeMismatch

MAX_RANK = 3


class Tensor:
    """A dense float64 array plus autodiff bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "vjp")

    def __init__(self, data, requires_grad=False, op=None, parents=(), vjp=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeMismatch(f"rank {arr.ndim} exceeds max rank {MAX_RANK}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = op
        self.parents = tuple(parents)
        self.vjp = vjp

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # Small conveniences used throughout the model code.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return multiply(self, other)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _finished(data, op, parents, vjp):
    """Wrap an op result, enforcing the all-finite forward invariant."""
    if not np.all(np.isfinite(data)):
        raise NonFinite(f"op {op!r} produced non-finite values")
    rg = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=rg, op=op, parents=parents, vjp=vjp if rg else None)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


# ---------------------------------------------------------------------------
# Forward ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    """Matrix product; rank-3 operands are batched over the leading axis.

    Supported: (2,2), (3,2), (3,3). ``transpose_b`` swaps the last two axes
    of ``b`` before the product (attention scores need Q @ K^T).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeMismatch(f"matmul needs rank >= 2, got {ad.shape} @ {bd.shape}")
    bmat = np.swapaxes(bd, -1, -2) if transpose_b else bd
    if ad.shape[-1] != bmat.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims differ: {ad.shape} @ {bmat.shape}")
    if ad.ndim == 3 and bd.ndim == 3 and ad.shape[0] != bd.shape[0]:
        raise ShapeMismatch(f"matmul batch dims differ: {ad.shape} @ {bd.shape}")
    out = ad @ bmat

    def vjp(g):
        if transpose_b:
            ga = g @ bd
            gb = np.swapaxes(ad, -1, -2) @ g if bd.ndim == ad.ndim else None
            if bd.ndim < ad.ndim:  # (3,2): sum batch
                gb = np.einsum("bij,bik->jk", ad, g)
            gb = np.swapaxes(gb, -1, -2)
        else:
            ga = g @ np.swapaxes(bd, -1, -2)
            if bd.ndim < ad.ndim:
                gb = np.einsum("bij,bik->jk", ad, g)
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _finished(out, "matmul", (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; rank-1 ``b`` matching the last axis acts as a bias."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    bias = bd.ndim == 1 and ad.ndim > 1 and bd.shape[0] == ad.shape[-1]
    if not bias and ad.shape != bd.shape:
        raise ShapeMismatch(f"add shapes differ: {ad.shape} vs {bd.shape}")
    out = ad + bd

    def vjp(g):
        gb = g.reshape(-1, bd.shape[0]).sum(axis=0) if bias else g
        return g, gb

    return _finished(out, "add", (a, b), vjp)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; rank-1 ``b`` matching the last axis acts as a gain."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    gain = bd.ndim == 1 and ad.ndim > 1 and bd.shape[0] == ad.shape[-1]
    if not gain and ad.shape != bd.shape:
        raise ShapeMismatch(f"multiply shapes differ: {ad.shape} vs {bd.shape}")
    out = ad * bd

    def vjp(g):
        ga = g * bd
        gb = (g * ad).reshape(-1, bd.shape[0]).sum(axis=0) if gain else g * ad
        return ga, gb

    return _finished(out, "multiply", (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    a = _as_tensor(a)
    c = float(c)
    return _finished(a.data * c, "scale", (a,), lambda g: (g * c,))


def concat(parts, axis: int = -1) -> Tensor:
    """Concatenate along one axis; all other dims must agree."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeMismatch("concat of zero tensors")
    ranks = {p.data.ndim for p in parts}
    if len(ranks) != 1:
        raise ShapeMismatch(f"concat rank mismatch: {[p.shape for p in parts]}")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _finished(out, "concat", tuple(parts), vjp)


def embedding_gather(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: table[V, H] gathered by an integer id array."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeMismatch("embedding ids must be integers")
    if table.data.ndim != 2:
        raise ShapeMismatch(f"embedding table must be rank 2, got {table.shape}")
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= table.data.shape[0]:
        raise ShapeMismatch("embedding id out of range")
    out = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (gt,)

    return _finished(out, "embedding-gather", (table,), vjp)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, log-sum-exp stabilized."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _finished(out, "softmax-rows", (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply per-feature gain and bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    h = x.data.shape[-1]
    if gain.data.shape != (h,) or bias.data.shape != (h,):
        raise ShapeMismatch("layer-norm gain/bias must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        gg = g * gain.data
        gx = inv / h * (h * gg - gg.sum(axis=-1, keepdims=True) - xhat * (gg * xhat).sum(axis=-1, keepdims=True))
        axes = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _finished(out, "layer-norm", (x, gain, bias), vjp)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Smooth GELU (tanh form)."""
    x = _as_tensor(x)
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def vjp(g):
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * d,)

    return _finished(out, "gelu-or-relu", (x,), vjp)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.maximum(x.data, 0.0)

    def vjp(g):
        return (g * (x.data > 0.0),)

    return _finished(out, "gelu-or-relu", (x,), vjp)


def sigmoid(x: Tensor) -> Tensor:
    """Overflow-safe logistic function."""
    x = _as_tensor(x)
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _finished(out, "sigmoid", (x,), vjp)


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(divide="raise", invalid="raise"):
        try:
            out = np.log(x.data)
        except FloatingPointError as exc:
            raise NonFinite("log of non-positive input") from exc

    def vjp(g):
        return (g / x.data,)

    return _finished(out, "log", (x,), vjp)


def power(x: Tensor, exponent: float) -> Tensor:
    """x ** c for a positive base and constant exponent (focal-loss factor)."""
    x = _as_tensor(x)
    c = float(exponent)
    if np.any(x.data < 0.0):
        raise NonFinite("power requires a non-negative base")
    out = x.data**c

    def vjp(g):
        if c == 0.0:  # constant output; avoids 0 * x**-1 at x == 0
            return (np.zeros_like(x.data),)
        return (g * c * x.data ** (c - 1.0),)

    return _finished(out, "power", (x,), vjp)


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    out = x.data.sum(axis=axis)
    shape = x.data.shape

    def vjp(g):
        if axis is None:
            return (np.full(shape, g),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _finished(out, "sum", (x,), vjp)


def reduce_mean(x: Tensor, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    out = x.data.mean(axis=axis)
    shape = x.data.shape
    n = x.data.size if axis is None else shape[axis]

    def vjp(g):
        if axis is None:
            return (np.full(shape, g / n),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape) / n,)

    return _finished(out, "mean", (x,), vjp)


def dropout_apply(x: Tensor, mask: np.ndarray) -> Tensor:
    """Apply a pre-sampled keep mask (already scaled by 1/keep_prob)."""
    x = _as_tensor(x)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x.data.shape:
        raise ShapeMismatch(f"dropout mask shape {mask.shape} != {x.shape}")
    out = x.data * mask

    def vjp(g):
        return (g * mask,)

    return _finished(out, "dropout-mask-apply", (x,), vjp)


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant; their grad is 0.

    ``mask`` may broadcast against ``x`` (e.g. a [B, 1, T] key mask over
    [B, T, T] attention scores).
    """
    x = _as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    try:
        out = np.where(mask, float(value), x.data)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    if out.shape != x.data.shape:
        raise ShapeMismatch(f"mask {mask.shape} broadcasts {x.shape} to {out.shape}")

    def vjp(g):
        return (np.where(mask, 0.0, g),)

    return _finished(out, "masked-fill", (x,), vjp)


def clip01(x: Tensor, eps: float = 1e-7) -> Tensor:
    """Clamp probabilities into [eps, 1-eps] (two masked fills)."""
    lo = masked_fill(x, x.data < eps, eps)
    return masked_fill(lo, lo.data > 1.0 - eps, 1.0 - eps)


OPS = {
    "matmul": matmul,
    "add": add,
    "multiply": multiply,
    "scale": scale,
    "concat": concat,
    "embedding-gather": embedding_gather,
    "softmax-rows": softmax_rows,
    "layer-norm": layer_norm,
    "gelu-or-relu": gelu,
    "relu": relu,
    "sigmoid": sigmoid,
    "log": log,
    "power": power,
    "mean": reduce_mean,
    "sum": reduce_sum,
    "dropout-mask-apply": dropout_apply,
    "masked-fill": masked_fill,
}


def apply_op(name: str, *args, **kwargs) -> Tensor:
    """Dispatch a forward op by name."""
    if name not in OPS:
        raise ShapeMismatch(f"unknown op {name!r}")
    return OPS[name](*args, **kwargs)


# ---------------------------------------------------------------------------
# Graph replay
# ---------------------------------------------------------------------------


@dataclass
class Graph:
    """Reverse topological closure of a root tensor (root last)."""

    nodes: list = field(default_factory=list)


def trace(root: Tensor) -> Graph:
    """Iterative post-order DFS; each node appears exactly once."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return Graph(nodes=order)


def backward(loss: Tensor, params=None) -> None:
    """Populate ``.grad`` on every reachable tensor with ``requires_grad``.

    Parameters listed in ``params`` but unreachable from ``loss`` get exact
    zero gradients. Raises DisconnectedGraph when the loss is a bare leaf.
    """
    if loss.data.size != 1:
        raise ShapeMismatch(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.parents:
        raise DisconnectedGraph("loss has no inputs")
    graph = trace(loss)

    needs = {}
    for node in graph.nodes:  # post-order: parents precede children
        needs[id(node)] = node.requires_grad or any(needs.get(id(p), False) for p in node.parents)

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad and not node.parents:
            node.grad = g if node.grad is None else node.grad + g
        if node.vjp is None:
            continue
        for p, gp in zip(node.parents, node.vjp(g)):
            if gp is None or not needs.get(id(p), False):
                continue
            if gp.shape != p.data.shape:
                raise ShapeMismatch(f"vjp of {node.op!r} returned {gp.shape} for parent {p.data.shape}")
            if id(p) in grads:
                grads[id(p)] += gp
            else:
                grads[id(p)] = gp

    if params is not None:
        for p in params.values() if isinstance(params, dict) else params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def zero_grads(params) -> None:
    for p in params.values() if isinstance(params, dict) else params:
        p.grad = None


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment accumulators keyed like the parameter dict."""

    m: dict
    v: dict
    step: int = 0


def init_adam(params: dict) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(p.data) for k, p in params.items()},
        v={k: np.zeros_like(p.data) for k, p in params.items()},
        step=0,
    )


def adam_step(
    params: dict,
    grads: dict,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """Bias-corrected Adam update, applied in place. Returns (params, state)."""
    if lr <= 0:
        raise ShapeMismatch("lr must be positive")
    state.step += 1
    b1t = 1.0 - beta1**state.step
    b2t = 1.0 - beta2**state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"grad shape {g.shape} != param {name!r} shape {p.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / b1t) / (np.sqrt(v / b2t) + eps)
    return params, state
