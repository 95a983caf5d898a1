"""Dense tensors with a recording tape for reverse-mode differentiation.

Only the handful of operations the keyword spotter needs are provided.  Ops
record a backward rule on the active :class:`Tape` whenever one of their
inputs requires a gradient; outside a tape nothing is recorded, which is what
inference uses.

Every op that performs multiply-accumulates (matmul, the two convolutions and
the affine part of the normalisations) adds its count to a global MAC counter
so analytic cost models can be checked against what actually ran.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ContractError(ValueError):
    """Raised when op inputs violate the op's shape contract."""


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def float64_mode():
    """Create new tensors in 64-bit precision (used for gradient checks)."""
    prev = default_dtype()
    _local.dtype = np.dtype(np.float64)
    try:
        yield
    finally:
        _local.dtype = prev


class MacCounter:
    """Instrumented multiply-accumulate counter fed by the ops themselves."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


def mac_counter() -> MacCounter:
    if not hasattr(_local, "macs"):
        _local.macs = MacCounter()
    return _local.macs


def _count(n) -> None:
    mac_counter().count += int(n)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_produced", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, np.ndarray) and dtype is None and data.dtype.kind == "f":
            self.data = data
        else:
            self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._produced = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside the block are recorded in
    execution order, so inputs always precede the ops that consume them.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self.records.append((out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf tensor."""
        if loss.data.size != 1:
            raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
        if not self.records:
            raise ContractError("backward: tape is empty")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t._produced:
                    key = id(t)
                    grads[key] = grads[key] + gi if key in grads else gi
                elif t.grad is None:
                    t.grad = np.array(gi, dtype=t.data.dtype).reshape(t.shape)
                else:
                    t.grad = t.grad + gi


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def _result(data: np.ndarray, inputs: Sequence[Tensor], fn: Callable) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._produced = True
        tape.record(out, tuple(inputs), fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError(f"{kind}: cannot combine shapes {a.shape} and {b.shape}") from None


# --- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    return _result(a.data * s, (a,), lambda g: (g * s,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * pos,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1 - s),))


def swish(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _result(x.data * s, (x,), lambda g: (g * (s + x.data * s * (1 - s)),))


def glu(x: Tensor, axis: int = -1) -> Tensor:
    """First half of ``axis`` gated by the sigmoid of the second half."""
    n = x.shape[axis]
    if n % 2:
        raise ContractError(f"glu: axis {axis} of shape {x.shape} has odd size")
    a, b = np.split(x.data, 2, axis=axis)
    s = _sigmoid(b)

    def bwd(g):
        return (np.concatenate([g * s, g * a * s * (1 - s)], axis=axis),)

    return _result(a * s, (x,), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), bwd)


# --- shape -----------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ContractError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, index) -> Tensor:
    def bwd(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(x.data[index], (x,), bwd)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _result(
        np.concatenate([x.data for x in xs], axis=axis),
        xs,
        lambda g: tuple(np.split(g, sizes, axis=axis)),
    )


# --- reductions ------------------------------------------------------------


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bwd)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    inv = x.data.dtype.type(1.0 / n)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * inv, x.shape).copy(),)

    return _result(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), bwd)


# --- linear algebra and convolution ----------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    k = a.shape[-1]
    if b.ndim == 2:
        out = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = a.data @ b.data
    _count(out.size * k)

    def bwd(g):
        if b.ndim == 2:
            ga = g @ b.data.T
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), bwd)


def conv1d_depthwise(x: Tensor, w: Tensor) -> Tensor:
    """Same-padded depthwise convolution over time.

    x: (B, T, H); w: (kernel, H) with odd kernel.
    """
    if x.ndim != 3 or w.ndim != 2 or w.shape[1] != x.shape[2] or w.shape[0] % 2 == 0:
        raise ContractError(f"conv1d-depthwise: bad shapes x={x.shape} w={w.shape}")
    k = w.shape[0]
    pad = k // 2
    B, T, H = x.shape
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
    out = np.zeros_like(x.data)
    for j in range(k):
        out += xp[:, j : j + T, :] * w.data[j]
    _count(B * T * H * k)

    def bwd(g):
        gw = np.empty_like(w.data)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gw[j] = (xp[:, j : j + T, :] * g).sum(axis=(0, 1))
            gxp[:, j : j + T, :] += g * w.data[j]
        return gxp[:, pad : pad + T, :], gw

    return _result(out, (x, w), bwd)


def conv2d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Valid (unpadded) 2-D convolution, channels last.

    x: (B, T, F, Cin); w: (kh, kw, Cin, Cout).
    """
    if x.ndim != 4 or w.ndim != 4 or w.shape[2] != x.shape[3]:
        raise ContractError(f"conv2d: bad shapes x={x.shape} w={w.shape}")
    kh, kw, cin, cout = w.shape
    B, T, F, _ = x.shape
    if T < kh or F < kw:
        raise ContractError(f"conv2d: input {x.shape} smaller than kernel {w.shape}")
    win = sliding_window_view(x.data, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    To, Fo = win.shape[1], win.shape[2]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(-1, kh * kw * cin)
    wm = w.data.reshape(kh * kw * cin, cout)
    out = (cols @ wm).reshape(B, To, Fo, cout)
    _count(out.size * kh * kw * cin)

    def bwd(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        gcols = (g2 @ wm.T).reshape(B, To, Fo, kh, kw, cin)
        gx = np.zeros_like(x.data)
        for i in range(kh):
            for j in range(kw):
                gx[:, i : i + stride * To : stride, j : j + stride * Fo : stride, :] += gcols[:, :, :, i, j, :]
        return gx, gw

    return _result(out, (x, w), bwd)


# --- normalisation ---------------------------------------------------------


def _norm_backward(g, xhat, rstd, gamma, axes):
    gxhat = g * gamma
    n = np.prod([xhat.shape[a] for a in axes])
    gx = rstd * (
        gxhat
        - gxhat.sum(axis=axes, keepdims=True) / n
        - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True) / n
    )
    red = tuple(range(g.ndim - 1))
    return gx, (g * xhat).sum(axis=red), g.sum(axis=red)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if gamma.shape != (x.shape[-1],) or beta.shape != gamma.shape:
        raise ContractError(f"layernorm: x={x.shape} gamma={gamma.shape} beta={beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * rstd
    _count(x.data.size)
    return _result(
        xhat * gamma.data + beta.data,
        (x, gamma, beta),
        lambda g: _norm_backward(g, xhat, rstd, gamma.data, (-1,)),
    )


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation over every axis but the last.

    Training uses batch statistics and updates the running buffers in place;
    otherwise the running statistics are applied as a fixed affine map.
    """
    if gamma.shape != (x.shape[-1],):
        raise ContractError(f"batchnorm: x={x.shape} gamma={gamma.shape}")
    axes = tuple(range(x.ndim - 1))
    _count(x.data.size)
    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        n = x.data.size // x.shape[-1]
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1 - momentum
        running_var += momentum * var.reshape(-1) * (n / max(n - 1, 1))
        rstd = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * rstd
        return _result(
            xhat * gamma.data + beta.data,
            (x, gamma, beta),
            lambda g: _norm_backward(g, xhat, rstd, gamma.data, axes),
        )
    rstd = (1.0 / np.sqrt(running_var + eps)).astype(x.data.dtype)
    xhat = (x.data - running_mean.astype(x.data.dtype)) * rstd

    def bwd(g):
        red = tuple(range(g.ndim - 1))
        return g * gamma.data * rstd, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), bwd)


# --- selection -------------------------------------------------------------


def gather(x: Tensor, index: np.ndarray) -> Tensor:
    """Pick ``x[b, index[b, s, c], c]`` along the time axis of a (B, T, C) tensor."""
    index = np.asarray(index)
    if x.ndim != 3 or index.ndim != 3 or index.shape[0] != x.shape[0] or index.shape[2] != x.shape[2]:
        raise ContractError(f"gather: x={x.shape} index={index.shape}")
    out = np.take_along_axis(x.data, index, axis=1)

    def bwd(g):
        full = np.zeros_like(x.data)
        b = np.arange(x.shape[0])[:, None, None]
        c = np.arange(x.shape[2])[None, None, :]
        np.add.at(full, (b, index, c), g)
        return (full,)

    return _result(out, (x,), bwd)


def maxpool1d_with_indices(x: Tensor, kernel: int, stride: int = 1) -> tuple[Tensor, np.ndarray]:
    """Max over time windows of a (B, T, C) tensor; ties go to the earliest step."""
    if x.ndim != 3 or x.shape[1] < kernel:
        raise ContractError(f"maxpool1d: x={x.shape} kernel={kernel}")
    win = sliding_window_view(x.data, kernel, axis=1)[:, ::stride]
    starts = (np.arange(win.shape[1]) * stride)[None, :, None]
    index = win.argmax(axis=-1) + starts
    return gather(x, index), index


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward ``hard``; backward as if the output were ``soft``."""
    return _result(np.asarray(hard, dtype=soft.data.dtype), (soft,), lambda g: (g,))


# --- losses ----------------------------------------------------------------


def _masked_mean(values: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, float]:
    n = int(mask.sum())
    if n == 0:
        return np.zeros((), values.dtype), 0.0
    return np.asarray((values * mask).sum() / n, values.dtype), 1.0 / n


def bce(p: Tensor, target, mask, eps: float = 1e-7) -> Tensor:
    """Binary cross-entropy on probabilities, averaged over ``mask``."""
    target = np.asarray(target, p.data.dtype)
    mask = np.asarray(mask, bool)
    if target.shape != p.shape or mask.shape != p.shape:
        raise ContractError(f"bce: p={p.shape} target={target.shape} mask={mask.shape}")
    pc = np.clip(p.data, eps, 1 - eps)
    vals = -(target * np.log(pc) + (1 - target) * np.log1p(-pc))
    out, w = _masked_mean(vals, mask)
    return _result(out, (p,), lambda g: (g * w * mask * (pc - target) / (pc * (1 - pc)),))


def ce(p: Tensor, labels, mask, eps: float = 1e-12) -> Tensor:
    """Cross-entropy on (N, K) probabilities with integer labels, averaged over ``mask``."""
    labels = np.asarray(labels)
    mask = np.asarray(mask, bool)
    if p.ndim != 2 or labels.shape != (p.shape[0],) or mask.shape != labels.shape:
        raise ContractError(f"ce: p={p.shape} labels={labels.shape} mask={mask.shape}")
    rows = np.arange(p.shape[0])
    safe = np.where(mask, labels, 0)
    picked = np.maximum(p.data[rows, safe], eps)
    out, w = _masked_mean(-np.log(picked), mask)

    def bwd(g):
        full = np.zeros_like(p.data)
        full[rows, safe] = np.where(mask, -g * w / picked, 0)
        return (full,)

    return _result(out, (p,), bwd)


def l1(pred: Tensor, target, mask) -> Tensor:
    """Mean absolute error over ``mask``."""
    target = np.asarray(target, pred.data.dtype)
    mask = np.asarray(mask, bool)
    if target.shape != pred.shape or mask.shape != pred.shape:
        raise ContractError(f"l1: pred={pred.shape} target={target.shape} mask={mask.shape}")
    diff = pred.data - target
    out, w = _masked_mean(np.abs(diff), mask)
    return _result(out, (pred,), lambda g: (g * w * mask * np.sign(diff),))


OP_KINDS = (
    "matmul",
    "add",
    "mul",
    "conv1d-depthwise",
    "conv2d",
    "sigmoid",
    "softmax",
    "swish",
    "glu",
    "layernorm",
    "batchnorm",
    "mean",
    "maxpool1d",
    "gather",
    "bce",
    "ce",
    "l1",
)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
