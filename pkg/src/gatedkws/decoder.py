"""Turn output steps into timed keyword proposals, prune with NMS, stream.

Offline and streaming decoding share every numeric step: both run the model on
one window at a time and both pad the frame sequence by ``PAD_FRAMES`` on each
side (the same padding the trainer applies), so they produce identical events.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .frontend import FRAME_S, StreamingFrontend, StreamState, window_offline
from .model import KwsModel, WindowOutput
from .supervision import LabelConfig

PAD_FRAMES = 25  # 250 ms
PAD_S = PAD_FRAMES * FRAME_S


@dataclass(frozen=True)
class Proposal:
    class_id: int
    score: float
    b_hat: float
    e_hat: float
    source_step: int

    def shifted(self, dt: float) -> "Proposal":
        return Proposal(self.class_id, self.score, self.b_hat + dt, self.e_hat + dt, self.source_step)


@dataclass
class DecoderConfig:
    theta: float = 0.95
    nms_iou: float = 0.5
    R: float = 1.0
    S: float = 0.040
    horizon_s: float = 2.4

    def __post_init__(self):
        if not 0.0 < self.theta <= 1.0:
            raise ValueError(f"theta must be in (0, 1], got {self.theta}")

    @classmethod
    def from_labels(cls, labels: LabelConfig, **kw) -> "DecoderConfig":
        return cls(R=labels.R, S=labels.S, **kw)


@dataclass
class DecodeStats:
    rejected_nonfinite: int = 0


def propose(t: int, y_class, y_width, y_offset, cfg: DecoderConfig, stats: DecodeStats | None = None) -> Proposal | None:
    """Proposal for global output step ``t`` if its best keyword score beats theta.

    Inverts the localization targets: the center is ``(t + R/(2S) + offset) * S``
    seconds and the width ``width * R`` seconds.
    """
    y_class = np.asarray(y_class)
    C = len(y_width)
    c = int(np.argmax(y_class[:C]))
    score = float(y_class[c])
    if not score > cfg.theta:
        return None
    w, o = float(y_width[c]), float(y_offset[c])
    if not (math.isfinite(w) and math.isfinite(o)):
        if stats is not None:
            stats.rejected_nonfinite += 1
        return None
    center = (t + cfg.R / (2 * cfg.S) + o) * cfg.S
    half = w * cfg.R / 2
    if not half > 0:
        half = 1e-3  # keep e_hat > b_hat for degenerate width predictions
    return Proposal(c + 1, score, center - half, center + half, t)


def temporal_iou(a: Proposal, b: Proposal) -> float:
    inter = min(a.e_hat, b.e_hat) - max(a.b_hat, b.b_hat)
    if inter <= 0:
        return 0.0
    union = max(a.e_hat, b.e_hat) - min(a.b_hat, b.b_hat)
    return inter / union


def _order(p: Proposal):
    return (-p.score, p.b_hat, p.class_id, p.e_hat, p.source_step)


def time_order(p: Proposal):
    return (p.b_hat, p.class_id, p.e_hat, -p.score, p.source_step)


def nms(proposals, iou_threshold: float = 0.5) -> list[Proposal]:
    """Greedy class-agnostic suppression in descending score order."""
    kept: list[Proposal] = []
    for p in sorted(proposals, key=_order):
        if all(temporal_iou(p, k) <= iou_threshold for k in kept):
            kept.append(p)
    return kept


def decode_steps(outputs, first_step: int, cfg: DecoderConfig, stats=None) -> list[Proposal]:
    """Proposals from consecutive window outputs starting at global step ``first_step``."""
    props = []
    t = first_step
    for out in outputs:
        for s in range(out.y_class.shape[0]):
            p = propose(t, out.y_class[s], out.y_width[s], out.y_offset[s], cfg, stats)
            if p is not None:
                props.append(p)
            t += 1
    return props


class StreamingNms:
    """NMS over proposals that arrive in time order.

    Proposals are grouped into clusters linked by IOU above the threshold; a
    cluster is finalised once its newest member is older than the horizon.
    Greedy NMS decomposes over such clusters, so the result equals offline NMS
    whenever no proposal links to one more than ``horizon_s`` older.
    """

    def __init__(self, cfg: DecoderConfig):
        self.cfg = cfg
        self.pending: list[Proposal] = []

    def _clusters(self):
        n = len(self.pending)
        parent = list(range(n))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for i in range(n):
            for j in range(i + 1, n):
                if temporal_iou(self.pending[i], self.pending[j]) > self.cfg.nms_iou:
                    parent[find(i)] = find(j)
        groups: dict[int, list[Proposal]] = {}
        for i in range(n):
            groups.setdefault(find(i), []).append(self.pending[i])
        return list(groups.values())

    def push(self, proposals, now_step: int) -> list[Proposal]:
        self.pending.extend(proposals)
        limit = now_step * self.cfg.S - self.cfg.horizon_s
        done, keep = [], []
        for group in self._clusters():
            if max(p.source_step for p in group) * self.cfg.S <= limit:
                done.extend(nms(group, self.cfg.nms_iou))
            else:
                keep.extend(group)
        self.pending = keep
        return sorted(done, key=time_order)

    def flush(self) -> list[Proposal]:
        done = []
        for group in self._clusters():
            done.extend(nms(group, self.cfg.nms_iou))
        self.pending = []
        return sorted(done, key=time_order)


def pad_frames(frames: np.ndarray, n: int = PAD_FRAMES) -> np.ndarray:
    z = np.zeros((n, frames.shape[1]), frames.dtype)
    return np.concatenate([z, frames, z])


def window_outputs(model: KwsModel, frames: np.ndarray, tags=None) -> list[WindowOutput]:
    """Pad, window and run the model one window at a time (batch size one)."""
    batch = window_offline(pad_frames(frames))
    return [model.predict_window(w, tag=None if tags is None else tags[i]) for i, w in enumerate(batch.x)]


def decode_utterance(model: KwsModel, frames: np.ndarray, cfg: DecoderConfig, tags=None, stats=None):
    """Offline decode: all steps, global NMS, times on the unpadded timeline."""
    outs = window_outputs(model, frames, tags)
    props = decode_steps(outs, 0, cfg, stats)
    kept = sorted(nms(props, cfg.nms_iou), key=time_order)
    return [p.shifted(-PAD_S) for p in kept], outs


@dataclass
class StreamingKws:
    """Feed PCM (or frames) incrementally; collect events and per-window telemetry."""

    model: KwsModel
    cfg: DecoderConfig = field(default_factory=DecoderConfig)

    def __post_init__(self):
        self.frontend = StreamingFrontend()
        self.state = StreamState(n_mels=self.model.encoder_cfg.n_mels)
        self.nms = StreamingNms(self.cfg)
        self.stats = DecodeStats()
        self.window_index = 0
        self.telemetry: list[dict] = []
        self._started = False
        self._finished = False

    def _start(self, dtype=np.float32):
        if not self._started:
            self._started = True
            return self.state.feed(np.zeros((PAD_FRAMES, self.state.n_mels), dtype))
        return []

    def _run(self, windows) -> list[Proposal]:
        events = []
        for w in windows:
            out = self.model.predict_window(w)
            first = 6 * self.window_index
            props = decode_steps([out], first, self.cfg, self.stats)
            self.telemetry.append(
                {
                    "window_index": self.window_index,
                    "gates_open_bitmask": int(sum(int(g) << i for i, g in enumerate(out.gates))),
                    "skip_fraction": out.skip_fraction,
                }
            )
            self.window_index += 1
            events.extend(self.nms.push(props, first + 5))
        return [p.shifted(-PAD_S) for p in events]

    def push_frames(self, frames: np.ndarray) -> list[Proposal]:
        wins = self._start(frames.dtype) + self.state.feed(frames)
        return self._run(wins)

    def push_audio(self, pcm) -> list[Proposal]:
        return self.push_frames(self.frontend.push(pcm))

    def finish(self) -> list[Proposal]:
        if self._finished:
            return []
        self._finished = True
        wins = self._start() + self.state.feed(np.zeros((PAD_FRAMES, self.state.n_mels), np.float32))
        wins += self.state.flush()
        events = self._run(wins)
        return events + [p.shifted(-PAD_S) for p in self.nms.flush()]


def stream_infer(pcm_chunks, model: KwsModel, cfg: DecoderConfig = DecoderConfig()):
    """Generator over ("event", Proposal) and ("telemetry", dict) records."""
    runner = StreamingKws(model, cfg)
    seen = 0
    for chunk in pcm_chunks:
        for ev in runner.push_audio(chunk):
            yield "event", ev
        for rec in runner.telemetry[seen:]:
            yield "telemetry", rec
        seen = len(runner.telemetry)
    for ev in runner.finish():
        yield "event", ev
    for rec in runner.telemetry[seen:]:
        yield "telemetry", rec
