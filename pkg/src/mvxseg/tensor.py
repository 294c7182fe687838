"""Minimal deterministic reverse-mode autodiff over dense numpy arrays.

Tensors wrap numpy ndarrays and record the ops that produced them on an
implicit tape (creation-ordered node ids). ``backward`` replays the tape in
exact reverse topological order, so gradient accumulation is bit-reproducible
run to run. Forward math is float32 by default; building parameters and
inputs in float64 turns the whole graph into a 64-bit one for sharp
finite-difference checks.

Only the primitives the segmentation network and its losses need are
implemented; there is no general broadcasting beyond row-vector /
column-vector / scalar cases.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "is_grad_enabled",
    "constant",
    "parameter",
    "matmul",
    "linear",
    "leaky_relu",
    "sigmoid",
    "tanh",
    "softmax_rows",
    "log_softmax",
    "absolute",
    "sqrt",
    "sum_all",
    "mean_all",
    "sum_axis",
    "concat_cols",
    "concat_rows",
    "slice_cols",
    "reshape",
    "gather_rows",
    "take_per_row",
    "conv_gather",
    "sparse_conv_apply",
    "segment_mean",
    "set_finite_checks",
    "backward",
    "BatchNorm",
    "AdamWState",
    "adamw_step",
    "named_tensors",
    "named_state",
    "scatter_add_rows",
]

_grad_enabled = True
_ids = itertools.count()
_finite_checks = False


def set_finite_checks(flag: bool) -> None:
    """Enable per-op NaN/Inf assertions (debug aid; costs a full scan per op)."""
    global _finite_checks
    _finite_checks = bool(flag)


class no_grad:
    """Context manager: ops executed inside build no graph (pure forward)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A dense array plus its position in the expression graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd", "_id")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = (), _bwd: Callable | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._bwd = _bwd
        self._id = next(_ids)
        if _finite_checks and self.data.dtype.kind == "f" \
                and not np.all(np.isfinite(self.data)):
            raise FloatingPointError("non-finite values in tensor")

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _result(data, parents, bwd):
        if _grad_enabled and any(p.requires_grad for p in parents):
            return Tensor(data, requires_grad=True, _parents=parents, _bwd=bwd)
        return Tensor(data)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- operators -------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(x, dtype=None) -> Tensor:
    arr = np.asarray(x, dtype=dtype) if dtype is not None else np.asarray(x)
    return Tensor(arr)


def parameter(x, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=True)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _wrap2(a, b):
    """Wrap a binary-op operand pair; bare floats/float arrays follow the
    Tensor operand's float dtype so float32 graphs never silently promote."""
    ta, tb = isinstance(a, Tensor), isinstance(b, Tensor)
    if ta and not tb:
        return a, _wrap_like(b, a.data.dtype)
    if tb and not ta:
        return _wrap_like(a, b.data.dtype), b
    return _wrap(a), _wrap(b)


def _wrap_like(x, dtype) -> Tensor:
    arr = np.asarray(x)
    if arr.dtype.kind == "f" and np.dtype(dtype).kind == "f" \
            and arr.dtype != np.dtype(dtype):
        arr = arr.astype(dtype)
    return Tensor(arr)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad over axes that were broadcast to reach grad.shape."""
    if grad.shape == shape:
        return grad
    g = grad
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap2(a, b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor._result(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _wrap2(a, b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return Tensor._result(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _wrap2(a, b)
    out = a.data * b.data

    def bwd(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return Tensor._result(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _wrap2(a, b)
    out = a.data / b.data

    def bwd(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return Tensor._result(out, (a, b), bwd)


def absolute(a) -> Tensor:
    a = _wrap(a)
    out = np.abs(a.data)

    def bwd(g):
        return (g * np.sign(a.data),)

    return Tensor._result(out, (a,), bwd)


def sqrt(a) -> Tensor:
    a = _wrap(a)
    out = np.sqrt(a.data)

    def bwd(g):
        return (g / (2.0 * np.maximum(out, np.finfo(out.dtype).tiny)),)

    return Tensor._result(out, (a,), bwd)


# -- linear algebra --------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._result(out, (a, b), bwd)


def linear(x, weight, bias=None) -> Tensor:
    """y = x @ weight + bias, with bias broadcast over rows."""
    x, weight = _wrap(x), _wrap(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.data.shape[1] != weight.data.shape[0]:
        raise ValueError(
            f"linear: x has {x.data.shape}, weight has {weight.data.shape}; "
            f"inner dimension must match")
    y = matmul(x, weight)
    if bias is not None:
        bias = _wrap(bias)
        if bias.data.size != weight.data.shape[1]:
            raise ValueError(f"linear: bias size {bias.data.size} != out width {weight.data.shape[1]}")
        y = add(y, reshape(bias, (1, weight.data.shape[1])))
    return y


# -- activations -----------------------------------------------------------------

def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = _wrap(a)
    out = np.maximum(a.data, slope * a.data)

    def bwd(g):
        return (g * np.where(a.data > 0, 1.0, slope).astype(g.dtype),)

    return Tensor._result(out, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    # exp(-|x|) never overflows; both branches share it
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return Tensor._result(out, (a,), bwd)


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return Tensor._result(out, (a,), bwd)


def softmax_rows(a) -> Tensor:
    """Row-wise softmax with max subtraction; rows sum to 1."""
    a = _wrap(a)
    if a.data.ndim != 2:
        raise ValueError(f"softmax_rows expects N x K, got {a.data.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return Tensor._result(out, (a,), bwd)


def log_softmax(a) -> Tensor:
    """Row-wise log softmax; exp of each row sums to 1."""
    a = _wrap(a)
    if a.data.ndim != 2:
        raise ValueError(f"log_softmax expects N x K, got {a.data.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def bwd(g):
        return (g - soft * g.sum(axis=1, keepdims=True),)

    return Tensor._result(out, (a,), bwd)


# -- reductions / shape ------------------------------------------------------------

def sum_all(a) -> Tensor:
    a = _wrap(a)
    out = a.data.sum()

    def bwd(g):
        return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype),)

    return Tensor._result(out, (a,), bwd)


def mean_all(a) -> Tensor:
    a = _wrap(a)
    n = a.data.size
    out = a.data.mean()

    def bwd(g):
        return (np.broadcast_to(g / n, a.data.shape).astype(a.data.dtype),)

    return Tensor._result(out, (a,), bwd)


def sum_axis(a, axis: int) -> Tensor:
    """Sum along one axis, keepdims=True."""
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype).copy(),)

    return Tensor._result(out, (a,), bwd)


def concat_cols(parts: Sequence) -> Tensor:
    parts = [_wrap(p) for p in parts]
    widths = [p.data.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)

    def bwd(g):
        grads, j = [], 0
        for w in widths:
            grads.append(g[:, j:j + w])
            j += w
        return tuple(grads)

    return Tensor._result(out, tuple(parts), bwd)


def concat_rows(parts: Sequence) -> Tensor:
    parts = [_wrap(p) for p in parts]
    heights = [p.data.shape[0] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=0)

    def bwd(g):
        grads, i = [], 0
        for h in heights:
            grads.append(g[i:i + h])
            i += h
        return tuple(grads)

    return Tensor._result(out, tuple(parts), bwd)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = _wrap(a)
    out = a.data[:, start:stop].copy()

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[:, start:stop] = g
        return (ga,)

    return Tensor._result(out, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.data.shape),)

    return Tensor._result(out, (a,), bwd)


# -- indexing ----------------------------------------------------------------------

def scatter_add_rows(target: np.ndarray, idx: np.ndarray, rows: np.ndarray) -> None:
    """target[idx[i]] += rows[i], deterministic (groups reduced in stable index order)."""
    if idx.size == 0:
        return
    order = np.argsort(idx, kind="stable")
    sorted_idx = idx[order]
    starts = np.flatnonzero(np.r_[True, sorted_idx[1:] != sorted_idx[:-1]])
    sums = np.add.reduceat(rows[order], starts, axis=0)
    target[sorted_idx[starts]] += sums


def gather_rows(a, idx: np.ndarray) -> Tensor:
    """out[i] = a[idx[i]]; idx entries of -1 yield zero rows."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.int64)
    missing = idx < 0
    safe = np.where(missing, 0, idx)
    out = a.data[safe]
    if missing.any():
        out = out.copy()
        out[missing] = 0

    def bwd(g):
        ga = np.zeros_like(a.data)
        valid = ~missing
        scatter_add_rows(ga, idx[valid], g[valid])
        return (ga,)

    return Tensor._result(out, (a,), bwd)


def take_per_row(a, cols: np.ndarray) -> Tensor:
    """out[i, 0] = a[i, cols[i]]."""
    a = _wrap(a)
    cols = np.asarray(cols, dtype=np.int64)
    n = a.data.shape[0]
    out = a.data[np.arange(n), cols][:, None]

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (np.arange(n), cols), g[:, 0])
        return (ga,)

    return Tensor._result(out, (a,), bwd)


def conv_gather(a, idx2d: np.ndarray) -> Tensor:
    """Im2col-style gather: out[i] = concat(a[idx2d[i, 0]], ..., a[idx2d[i, K-1]]).

    idx2d entries of -1 contribute zero blocks. Output is (M, K * C) for a of
    shape (Ma, C); with a weight matrix reshaped to (K * C, Cout) this turns a
    sparse convolution into a single matmul.
    """
    a = _wrap(a)
    idx2d = np.asarray(idx2d, dtype=np.int64)
    m, k = idx2d.shape
    c = a.data.shape[1]
    padded = np.concatenate([a.data, np.zeros((1, c), dtype=a.data.dtype)], axis=0)
    safe = np.where(idx2d < 0, a.data.shape[0], idx2d)
    out = padded[safe].reshape(m, k * c)

    def bwd(g):
        ga = np.zeros_like(a.data)
        flat_idx = idx2d.ravel()
        valid = flat_idx >= 0
        scatter_add_rows(ga, flat_idx[valid], g.reshape(m * k, c)[valid])
        return (ga,)

    return Tensor._result(out, (a,), bwd)


def sparse_conv_apply(x, in_rows: np.ndarray, out_rows: np.ndarray,
                      bounds: np.ndarray, weight, bias, m_out: int) -> Tensor:
    """Sparse convolution over concatenated per-offset row pairs.

    Pairs (out_rows[i], in_rows[i]) are grouped by stencil offset:
    ``bounds[j]:bounds[j+1]`` is offset j's slice. One gather feeds contiguous
    per-offset matmuls with ``weight[j]`` of shape (n_offsets, Cin, Cout);
    rows are unique within an offset, so ``out[rows] += block`` never
    collides and the whole op is deterministic.
    """
    x, weight = _wrap(x), _wrap(weight)
    w3 = weight.data
    n_off, c_in, c_out = w3.shape
    if x.data.shape[1] != c_in:
        raise ValueError(f"feature width {x.data.shape[1]} != kernel input width {c_in}")
    # per-offset gather -> matmul -> scatter keeps each slice cache-hot
    out = np.zeros((m_out, c_out), dtype=x.data.dtype)
    for j in range(n_off):
        b, e = bounds[j], bounds[j + 1]
        if e > b:
            out[out_rows[b:e]] += x.data[in_rows[b:e]] @ w3[j]
    if bias is not None:
        bias = _wrap(bias)
        out += bias.data.reshape(1, c_out)

    def bwd(g):
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(w3)
        for j in range(n_off):
            b, e = bounds[j], bounds[j + 1]
            if e > b:
                g_j = g[out_rows[b:e]]
                gx[in_rows[b:e]] += g_j @ w3[j].T
                gw[j] = x.data[in_rows[b:e]].T @ g_j
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=0).reshape(bias.data.shape))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(out, parents, bwd)


def segment_mean(a, seg_ids: np.ndarray, n_segments: int) -> Tensor:
    """Per-segment arithmetic mean of rows; members accumulate strictly in
    ascending row order (np.add.at is sequential, unlike reduceat)."""
    a = _wrap(a)
    seg_ids = np.asarray(seg_ids, dtype=np.int64)
    sums = np.zeros((n_segments, a.data.shape[1]), dtype=a.data.dtype)
    np.add.at(sums, seg_ids, a.data)
    counts = np.bincount(seg_ids, minlength=n_segments).astype(a.data.dtype)
    denom = np.maximum(counts, 1.0)[:, None]
    out = sums / denom

    def bwd(g):
        return ((g / denom)[seg_ids],)

    return Tensor._result(out, (a,), bwd)


# -- backward ------------------------------------------------------------------------

def _topo_from(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order  # parents precede children


def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None):
    """Run reverse-mode accumulation from a scalar loss.

    Sets ``.grad`` on every reachable tensor that requires grad. When
    ``params`` is given, returns ``{name: gradient}`` with zero arrays for
    parameters the loss does not depend on.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    order = _topo_from(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._bwd is None or node.grad is None:
            continue
        grads = node._bwd(node.grad)
        for parent, g in zip(node._parents, grads):
            if not parent.requires_grad or g is None:
                continue
            if parent.grad is None:
                parent.grad = g.astype(parent.data.dtype, copy=True) \
                    if g.dtype != parent.data.dtype else g.copy()
            else:
                parent.grad += g
    if params is not None:
        return {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}
    return None


# -- batch normalization ----------------------------------------------------------

@dataclass
class BatchNorm:
    """Per-channel normalization over rows with running statistics.

    Training mode normalizes by batch statistics and updates the running
    mean/variance; inference mode uses the frozen running statistics.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @staticmethod
    def create(width: int, dtype=np.float32) -> "BatchNorm":
        return BatchNorm(
            gamma=parameter(np.ones(width), dtype=dtype),
            beta=parameter(np.zeros(width), dtype=dtype),
            running_mean=np.zeros(width, dtype=dtype),
            running_var=np.ones(width, dtype=dtype),
        )

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        n, c = x.data.shape
        if training:
            mu = mul(sum_axis(x, 0), 1.0 / n)
            diff = sub(x, mu)
            var = mul(sum_axis(mul(diff, diff), 0), 1.0 / n)
            mom = self.momentum
            self.running_mean = ((1 - mom) * self.running_mean
                                 + mom * mu.data.ravel()).astype(self.running_mean.dtype)
            self.running_var = ((1 - mom) * self.running_var
                                + mom * var.data.ravel()).astype(self.running_var.dtype)
            inv = div(1.0, sqrt(add(var, self.eps)))
            xhat = mul(diff, inv)
        else:
            mu = self.running_mean[None, :]
            inv = 1.0 / np.sqrt(self.running_var[None, :] + self.eps)
            xhat = mul(sub(x, constant(mu)), constant(inv))
        return add(mul(xhat, reshape(self.gamma, (1, c))), reshape(self.beta, (1, c)))


# -- optimizer -----------------------------------------------------------------------

@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
               state: AdamWState, lr: float, weight_decay: float = 0.01,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """One decoupled-weight-decay Adam update, in place on the parameter data."""
    state.step += 1
    b1, b2 = betas
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(f"adamw_step: grad shape {g.shape} != param shape {p.data.shape} ({name})")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data = p.data - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p.data)


# -- parameter traversal ---------------------------------------------------------------

def named_tensors(obj, prefix: str = "") -> Iterable[tuple[str, Tensor]]:
    """Walk dataclasses/lists/dicts yielding (dotted name, Tensor) in field order."""
    import dataclasses

    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            yield from named_tensors(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_tensors(item, f"{prefix}.{i}")
    elif isinstance(obj, dict):
        for key in sorted(obj):
            yield from named_tensors(obj[key], f"{prefix}.{key}")


def named_state(obj, prefix: str = "") -> Iterable[tuple[str, np.ndarray]]:
    """Like named_tensors but also yields plain ndarray fields (running stats)."""
    import dataclasses

    if isinstance(obj, Tensor):
        yield prefix, obj.data
    elif isinstance(obj, np.ndarray):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            yield from named_state(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_state(item, f"{prefix}.{i}")
    elif isinstance(obj, dict):
        for key in sorted(obj):
            yield from named_state(obj[key], f"{prefix}.{key}")
