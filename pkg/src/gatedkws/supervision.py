"""Per-step training targets from keyword alignments, and the training loss.

Step ``t`` looks at the receptive field ``(t*S, t*S + R)`` seconds.  How much
of a keyword falls inside it (intersection over the keyword's own duration)
decides whether the step is a positive, a negative or left unsupervised.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .heads import WindowPredictions
from .numerics import Tensor

UNDEFINED = -1


@dataclass(frozen=True)
class GroundTruthEvent:
    class_id: int  # 1..C
    b: float
    e: float

    def __post_init__(self):
        if not (self.e > self.b >= 0):
            raise ValueError(f"event needs e > b >= 0, got b={self.b} e={self.e}")


@dataclass(frozen=True)
class LabelConfig:
    R: float = 1.0
    S: float = 0.040
    iog_hi: float = 0.95
    iog_lo_det: float = 0.5
    iog_lo_class: float = 0.05

    @property
    def center_offset(self) -> float:
        return self.R / (2 * self.S)


@dataclass
class LabelTensors:
    y_det: np.ndarray  # (T, C) float 0/1, meaningful where det_mask
    det_mask: np.ndarray  # (T, C) bool
    y_class: np.ndarray  # (T,) class id 1..C+1, UNDEFINED where masked
    y_width: np.ndarray  # (T, C)
    y_offset: np.ndarray  # (T, C)
    loc_mask: np.ndarray  # (T, C) bool

    @property
    def class_index(self) -> np.ndarray:
        """0-based channel index for the classification loss (-1 when undefined)."""
        return np.where(self.y_class == UNDEFINED, -1, self.y_class - 1)

    @staticmethod
    def concat(parts: list["LabelTensors"]) -> "LabelTensors":
        return LabelTensors(*(np.concatenate([getattr(p, f) for p in parts]) for f in LabelTensors.__dataclass_fields__))


def iog(t, event: GroundTruthEvent, cfg: LabelConfig = LabelConfig()):
    """Fraction of ``event`` covered by the receptive field of step ``t``."""
    start = np.asarray(t, dtype=np.float64) * cfg.S
    overlap = np.clip(np.minimum(start + cfg.R, event.e) - np.maximum(start, event.b), 0.0, None)
    return overlap / (event.e - event.b)


def _iog_matrix(events, T: int, n_classes: int, cfg: LabelConfig):
    """Per-(step, class) max IOG and the index of the event attaining it."""
    best = np.zeros((T, n_classes))
    arg = np.full((T, n_classes), -1)
    t = np.arange(T)
    for i, ev in enumerate(events):
        if not 1 <= ev.class_id <= n_classes:
            continue
        v = iog(t, ev, cfg)
        c = ev.class_id - 1
        better = v > best[:, c]
        best[better, c] = v[better]
        arg[better, c] = i
    return best, arg


def make_detection_labels(events, T: int, n_classes: int, cfg: LabelConfig = LabelConfig()):
    """Returns (y_det, det_mask); masked where iog_lo_det <= iog <= iog_hi."""
    best, _ = _iog_matrix(events, T, n_classes, cfg)
    pos = best > cfg.iog_hi
    neg = best < cfg.iog_lo_det
    return pos.astype(np.float32), pos | neg


def make_classification_labels(events, T: int, n_classes: int, cfg: LabelConfig = LabelConfig()) -> np.ndarray:
    best, _ = _iog_matrix(events, T, n_classes, cfg)
    labels = np.full(T, UNDEFINED)
    hit = (best > cfg.iog_hi).any(axis=1)
    if hit.any():
        labels[hit] = best[hit].argmax(axis=1) + 1
    background = (best < cfg.iog_lo_class).all(axis=1)
    labels[background] = n_classes + 1
    return labels


def make_localization_targets(events, T: int, n_classes: int, cfg: LabelConfig = LabelConfig()):
    """Returns (y_width, y_offset, loc_mask); width in units of R, offset in steps."""
    best, arg = _iog_matrix(events, T, n_classes, cfg)
    mask = best > cfg.iog_hi
    width = np.zeros((T, n_classes), np.float64)
    offset = np.zeros((T, n_classes), np.float64)
    center = np.broadcast_to(np.arange(T)[:, None] + cfg.center_offset, (T, n_classes))
    for i, ev in enumerate(events):
        sel = mask & (arg == i)
        width[sel] = (ev.e - ev.b) / cfg.R
        offset[sel] = ((ev.b + ev.e) / (2 * cfg.S) - center)[sel]
    return width, offset, mask


def make_labels(events, T: int, n_classes: int, cfg: LabelConfig = LabelConfig()) -> LabelTensors:
    y_det, det_mask = make_detection_labels(events, T, n_classes, cfg)
    y_class = make_classification_labels(events, T, n_classes, cfg)
    width, offset, loc_mask = make_localization_targets(events, T, n_classes, cfg)
    return LabelTensors(y_det, det_mask, y_class, width, offset, loc_mask)


def total_loss(preds: WindowPredictions, labels: LabelTensors, f_open: Tensor | None = None, lam: float = 1.0):
    """Masked BCE + masked CE + masked L1 (+ lam * f_open).

    ``preds`` holds the windows of one or more utterances stacked in time
    order, so flattening (window, step) gives the global step axis.
    Returns the scalar loss tensor and a dict of float components.
    """
    B, S6, C = preds.y_det.shape
    n = B * S6
    det = nx.reshape(preds.y_det, (n, C))
    cls = nx.reshape(preds.y_class, (n, C + 1))
    loc = nx.concat([nx.reshape(preds.y_width, (n, C)), nx.reshape(preds.y_offset, (n, C))], axis=1)

    l_det = nx.bce(det, labels.y_det, labels.det_mask)
    idx = labels.class_index
    l_cls = nx.ce(cls, np.maximum(idx, 0), idx >= 0)
    l_loc = nx.l1(
        loc,
        np.concatenate([labels.y_width, labels.y_offset], axis=1),
        np.concatenate([labels.loc_mask, labels.loc_mask], axis=1),
    )
    loss = nx.add(nx.add(l_det, l_cls), l_loc)
    parts = {"det": float(l_det.data), "class": float(l_cls.data), "loc": float(l_loc.data), "gate": 0.0}
    if f_open is not None and lam:
        gate = nx.scale(f_open, lam)
        parts["gate"] = float(gate.data)
        loss = nx.add(loss, gate)
    parts["total"] = float(loss.data)
    return loss, parts
