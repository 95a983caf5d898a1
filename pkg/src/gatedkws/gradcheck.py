"""Central finite-difference checks of the tape's analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tape, Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max(initial=0.0))


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, eps: float = 1e-4) -> np.ndarray:
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(fn().data)
        flat[i] = orig - eps
        down = float(fn().data)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def check(fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-4) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` rebuilds a scalar loss from ``tensors`` (64-bit leaves) on every call.
    """
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, relative_error(analytic, numeric_grad(fn, t, eps)))
    return worst


def _leaf(rng, *shape, low=-1.0, high=1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape).astype(np.float64), requires_grad=True)


def _case(rng, kind: str):
    """Return (loss builder, leaves) exercising a single op kind."""
    if kind == "matmul":
        a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
        body = lambda: nx.matmul(a, b)  # noqa: E731
        leaves = [a, b]
    elif kind == "add":
        a, b = _leaf(rng, 3, 4), _leaf(rng, 4)
        body = lambda: nx.add(a, b)  # noqa: E731
        leaves = [a, b]
    elif kind == "mul":
        a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 1, 1)
        body = lambda: nx.mul(a, b)  # noqa: E731
        leaves = [a, b]
    elif kind == "conv1d-depthwise":
        x, w = _leaf(rng, 2, 6, 3), _leaf(rng, 3, 3)
        body = lambda: nx.conv1d_depthwise(x, w)  # noqa: E731
        leaves = [x, w]
    elif kind == "conv2d":
        x, w = _leaf(rng, 1, 7, 6, 2), _leaf(rng, 3, 3, 2, 2)
        body = lambda: nx.conv2d(x, w, stride=2)  # noqa: E731
        leaves = [x, w]
    elif kind == "sigmoid":
        x = _leaf(rng, 4, 5, low=-3, high=3)
        body = lambda: nx.sigmoid(x)  # noqa: E731
        leaves = [x]
    elif kind == "softmax":
        x = _leaf(rng, 4, 5, low=-3, high=3)
        body = lambda: nx.softmax(x)  # noqa: E731
        leaves = [x]
    elif kind == "swish":
        x = _leaf(rng, 4, 5, low=-3, high=3)
        body = lambda: nx.swish(x)  # noqa: E731
        leaves = [x]
    elif kind == "glu":
        x = _leaf(rng, 3, 8, low=-3, high=3)
        body = lambda: nx.glu(x)  # noqa: E731
        leaves = [x]
    elif kind == "layernorm":
        x, g, b = _leaf(rng, 3, 6), _leaf(rng, 6, low=0.5, high=1.5), _leaf(rng, 6)
        body = lambda: nx.layernorm(x, g, b)  # noqa: E731
        leaves = [x, g, b]
    elif kind == "batchnorm":
        x, g, b = _leaf(rng, 2, 5, 4), _leaf(rng, 4, low=0.5, high=1.5), _leaf(rng, 4)
        rm, rv = np.zeros(4), np.ones(4)
        body = lambda: nx.batchnorm(x, g, b, rm, rv, training=True)  # noqa: E731
        leaves = [x, g, b]
    elif kind == "mean":
        x = _leaf(rng, 3, 4, 5)
        body = lambda: nx.mean(x, axis=1)  # noqa: E731
        leaves = [x]
    elif kind == "maxpool1d":
        x = _leaf(rng, 2, 8, 3)
        body = lambda: nx.maxpool1d_with_indices(x, kernel=4)[0]  # noqa: E731
        leaves = [x]
    elif kind == "gather":
        x = _leaf(rng, 2, 6, 3)
        idx = rng.integers(0, 6, size=(2, 4, 3))
        body = lambda: nx.gather(x, idx)  # noqa: E731
        leaves = [x]
    elif kind == "bce":
        p = _leaf(rng, 4, 5, low=0.05, high=0.95)
        y = rng.integers(0, 2, size=(4, 5))
        m = rng.random((4, 5)) < 0.7
        return (lambda: nx.bce(p, y, m)), [p]
    elif kind == "ce":
        p = _leaf(rng, 6, 4, low=0.05, high=0.95)
        y = rng.integers(0, 4, size=6)
        m = rng.random(6) < 0.7
        m[0] = True
        return (lambda: nx.ce(p, y, m)), [p]
    elif kind == "l1":
        x = _leaf(rng, 4, 5)
        y = x.data + rng.choice([-1.0, 1.0], size=x.shape) * rng.uniform(0.1, 1.0, size=x.shape)
        m = rng.random((4, 5)) < 0.7
        return (lambda: nx.l1(x, y, m)), [x]
    else:
        raise KeyError(kind)
    with nx.float64_mode():
        proj = rng.standard_normal(body().shape)
    return (lambda: nx.sum(nx.mul(body(), proj))), leaves


def check_op(kind: str, seed: int, eps: float = 1e-4) -> float:
    rng = np.random.default_rng(seed)
    with nx.float64_mode():
        fn, leaves = _case(rng, kind)
        return check(fn, leaves, eps)


def run_suite(seeds: int = 20, kinds: Sequence[str] = nx.OP_KINDS) -> dict[str, float]:
    """Worst relative error per op kind over ``seeds`` random cases."""
    return {k: max(check_op(k, s) for s in range(seeds)) for k in kinds}


def check_model(seed: int, eps: float = 1e-6, per_tensor: int = 6, floor: float = 1e-5) -> float:
    """Whole-model check: toy encoder (H=8, one block) + heads + loss, 64-bit.

    Gates are left out because the straight-through estimator is not the
    derivative of its forward value.  Up to ``per_tensor`` random entries of
    each parameter are perturbed.  A small step keeps ReLU and max-pool
    kinks out of the difference; the larger ``floor`` absorbs its round-off
    on near-zero gradients.
    """
    from .encoder import TRAIN, EncoderConfig
    from .model import KwsModel
    from .supervision import GroundTruthEvent, make_labels, total_loss

    rng = np.random.default_rng(seed)
    cfg = EncoderConfig(hidden=8, blocks=1, heads=2, conv_kernel=3, subsample_channels=2, dropout=0.0, gating=False)
    model = KwsModel(cfg, 2, seed=seed).astype(np.float64)
    x = rng.standard_normal((2, 120, cfg.n_mels))
    b = rng.uniform(0.05, 0.4)
    labels = make_labels([GroundTruthEvent(int(rng.integers(1, 3)), b, b + rng.uniform(0.3, 0.6))], 12, 2)
    params = model.parameters()
    with nx.float64_mode():

        def fn():
            preds, _ = model.forward(x, TRAIN)
            return total_loss(preds, labels)[0]

        model.zero_grad()
        with Tape() as tape:
            loss = fn()
        tape.backward(loss)
        worst = 0.0
        for t in params:
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            picks = rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False)
            numeric = np.empty(len(picks))
            for j, i in enumerate(picks):
                orig = flat[i]
                flat[i] = orig + eps
                up = float(fn().data)
                flat[i] = orig - eps
                down = float(fn().data)
                flat[i] = orig
                numeric[j] = (up - down) / (2 * eps)
            worst = max(worst, relative_error(analytic.reshape(-1)[picks], numeric, floor=floor))
    return worst
