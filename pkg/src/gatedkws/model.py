"""Encoder + heads, window-level inference, and checkpoint files.

Checkpoint layout (``.npz``, written with :func:`numpy.savez`):

``__format__``   int array ``[CHECKPOINT_VERSION]``
``__config__``   0-d unicode array holding JSON ``{"encoder": {...}, "n_classes": C, "mask_mode": ..., "extra": {...}}``
``<name>``       one array per tensor, named by its attribute path, e.g.
                 ``encoder.blocks.0.modules.1.q.weight``; arrays keep their dtype.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .encoder import INFER, TRAIN, Encoder, EncoderConfig, EncodeResult
from .frontend import WINDOW_FRAMES
from .heads import Heads, WindowPredictions
from .layers import Module

CHECKPOINT_VERSION = 1


@dataclass
class WindowOutput:
    """Numpy view of one window's six output steps."""

    y_det: np.ndarray  # (6, C)
    y_class: np.ndarray  # (6, C + 1)
    y_width: np.ndarray
    y_offset: np.ndarray
    gates: np.ndarray  # (4 * N_z,)
    skip_fraction: float


class KwsModel(Module):
    def __init__(self, encoder_cfg: EncoderConfig, n_classes: int, seed: int = 0, mask_mode: str = "zero"):
        rng = np.random.default_rng(seed)
        # gates draw from their own stream so gated and plain models share every other weight
        gate_rng = np.random.default_rng([seed, 1])
        self.encoder_cfg = encoder_cfg
        self.n_classes = n_classes
        self.encoder = Encoder(encoder_cfg, rng, gate_rng)
        self.heads = Heads(encoder_cfg.hidden, n_classes, rng, mask_mode)
        self.extra: dict = {}

    @property
    def ledger(self):
        return self.encoder.ledger

    def forward(self, x, mode: str = TRAIN, rng=None, force=None, tags=None) -> tuple[WindowPredictions, EncodeResult]:
        enc = self.encoder.encode(x, mode, rng, force, tags)
        return self.heads(enc.z), enc

    def predict_window(self, window: np.ndarray, force=None, tag=None) -> WindowOutput:
        """Inference on a single (120, 40) or (1, 120, 40) window with batch size one."""
        x = np.asarray(window, np.float32).reshape(1, WINDOW_FRAMES, -1)
        before = (self.ledger.executed_macs, self.ledger.gateable_total_macs)
        preds, enc = self.forward(x, INFER, force=force, tags=None if tag is None else [tag])
        executed = self.ledger.executed_macs - before[0]
        gateable = self.ledger.gateable_total_macs - before[1]
        return WindowOutput(
            y_det=preds.y_det.data[0],
            y_class=preds.y_class.data[0],
            y_width=preds.y_width.data[0],
            y_offset=preds.y_offset.data[0],
            gates=enc.gates[0],
            skip_fraction=1.0 - executed / gateable if gateable else 0.0,
        )

    def config_dict(self) -> dict:
        return {
            "encoder": self.encoder_cfg.to_dict(),
            "n_classes": self.n_classes,
            "mask_mode": self.heads.mask_mode,
            "extra": self.extra,
        }


def transfer_weights(dst: KwsModel, src: KwsModel) -> list[str]:
    """Copy every tensor of ``src`` that ``dst`` also has (e.g. a plain model into a gated one)."""
    state = dst.state_dict()
    shared = {k: v for k, v in src.state_dict().items() if k in state}
    for k, v in shared.items():
        if v.shape != state[k].shape:
            raise ValueError(f"tensor {k} has shape {v.shape}, target expects {state[k].shape}")
    state.update(shared)
    dst.load_state_dict(state)
    if "feature_stats" in src.extra:
        dst.extra["feature_stats"] = src.extra["feature_stats"]
    return sorted(shared)


def save_checkpoint(model: KwsModel, path) -> None:
    arrays = {"__format__": np.array([CHECKPOINT_VERSION]), "__config__": np.array(json.dumps(model.config_dict()))}
    for name, arr in model.state_dict().items():
        if name.startswith("__"):
            raise ValueError(f"reserved tensor name {name}")
        arrays[name] = arr
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> KwsModel:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["__format__"][0])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        cfg = json.loads(str(data["__config__"]))
        state = {k: data[k] for k in data.files if not k.startswith("__")}
    model = KwsModel(EncoderConfig(**cfg["encoder"]), cfg["n_classes"], mask_mode=cfg["mask_mode"])
    model.extra = cfg.get("extra", {})
    model.load_state_dict(state)
    return model
