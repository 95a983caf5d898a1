"""Detection, masked classification and localization heads plus max-pool selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .layers import Linear, Module
from .numerics import ContractError, Tensor

POOL_KERNEL = 24  # 1 s of 40 ms steps
NEG_INF_LOGIT = -1e9


@dataclass
class WindowPredictions:
    y_det: Tensor  # (B, 6, C)
    y_class: Tensor  # (B, 6, C + 1); channel C is "no keyword"
    y_width: Tensor  # (B, 6, C)
    y_offset: Tensor  # (B, 6, C)
    selected_t: np.ndarray  # (B, 6, C) step index into the 29 encoder steps
    selected_bg: np.ndarray  # (B, 6)
    y_class_steps: Tensor | None = None  # (B, 29, C + 1) before pooling

    @property
    def steps(self) -> int:
        return self.y_det.shape[1]


class Heads(Module):
    def __init__(self, hidden: int, n_classes: int, rng, mask_mode: str = "zero"):
        if mask_mode not in ("zero", "neg_inf"):
            raise ValueError(f"mask_mode must be 'zero' or 'neg_inf', got {mask_mode!r}")
        self.n_classes = n_classes
        self.mask_mode = mask_mode
        self.det = Linear(hidden, n_classes, rng)
        self.cls = Linear(hidden, n_classes + 1, rng)
        self.loc = Linear(hidden, 2 * n_classes, rng)

    def __call__(self, z: Tensor) -> WindowPredictions:
        y_det = detect(z, self)
        y_class = classify(z, y_det, self)
        widths, offsets = localize(z, self)
        return maxpool_select(y_class, y_det, widths, offsets)


def detect(z: Tensor, heads: Heads) -> Tensor:
    return nx.sigmoid(heads.det(z))


def classify(z: Tensor, y_det: Tensor, heads: Heads) -> Tensor:
    """Softmax over C + 1 classes with keyword logits switched off where detection < 0.5.

    In the default "zero" mode a switched-off logit is multiplied by zero (it
    still competes at value 0); "neg_inf" removes it from the softmax instead.
    """
    logits = heads.cls(z)
    on = (y_det.data >= 0.5).astype(logits.data.dtype)
    mask = np.concatenate([on, np.ones(on.shape[:-1] + (1,), on.dtype)], axis=-1)
    if heads.mask_mode == "zero":
        logits = nx.mul(logits, mask)
    else:
        logits = nx.add(nx.mul(logits, mask), (1.0 - mask) * NEG_INF_LOGIT)
    return nx.softmax(logits)


def localize(z: Tensor, heads: Heads) -> tuple[Tensor, Tensor]:
    """Widths are the first C outputs of the localization layer, offsets the last C."""
    out = heads.loc(z)
    C = heads.n_classes
    return nx.getitem(out, (Ellipsis, slice(0, C))), nx.getitem(out, (Ellipsis, slice(C, 2 * C)))


def maxpool_select(y_class: Tensor, y_det: Tensor, widths: Tensor, offsets: Tensor, kernel: int = POOL_KERNEL) -> WindowPredictions:
    """Per-class max-pool of class posteriors over time; gather the other outputs at the winners."""
    if y_class.ndim != 3 or y_class.shape[1] < kernel:
        raise ContractError(f"maxpool_select: y_class {y_class.shape} shorter than kernel {kernel}")
    C = y_class.shape[2] - 1
    fg, idx = nx.maxpool1d_with_indices(nx.getitem(y_class, (Ellipsis, slice(0, C))), kernel)
    bg, idx_bg = nx.maxpool1d_with_indices(nx.getitem(y_class, (Ellipsis, slice(C, C + 1))), kernel)
    return WindowPredictions(
        y_det=nx.gather(y_det, idx),
        y_class=nx.concat([fg, bg], axis=2),
        y_width=nx.gather(widths, idx),
        y_offset=nx.gather(offsets, idx),
        selected_t=idx,
        selected_bg=idx_bg[..., 0],
        y_class_steps=y_class,
    )
