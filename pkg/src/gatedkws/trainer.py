"""Training loop and dataset evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .decoder import PAD_FRAMES, PAD_S, DecodeStats, DecoderConfig, decode_steps, nms, time_order
from .encoder import TRAIN, mac_report
from .frontend import FRAME_S, SHIFT_FRAMES, WINDOW_FRAMES, window_offline
from .layers import freeze_batchnorm
from .metrics import compute_report, match_dataset, mtwv
from .model import CHECKPOINT_VERSION, KwsModel, load_checkpoint, save_checkpoint
from .supervision import GroundTruthEvent, LabelConfig, LabelTensors, make_labels, total_loss

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr_max: float = 1e-3
    lr_min: float = 1e-4
    epochs: int = 30
    batch_utterances: int = 8
    lam: float = 1.0
    gate_pretrain_epochs: int = -1  # -1: 10% of epochs
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    finetune_gates: bool = False
    validate_every: int = 1
    theta: float = 0.95

    def __post_init__(self):
        if self.gate_pretrain_epochs < 0:
            self.gate_pretrain_epochs = max(1, self.epochs // 10) if self.epochs > 1 else 0
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.gate_pretrain_epochs > self.epochs:
            raise ValueError("gate_pretrain_epochs cannot exceed epochs")
        if self.batch_utterances < 1:
            raise ValueError("batch_utterances must be positive")


def lr_at(epoch: float, cfg: TrainConfig) -> float:
    """Cosine annealing from lr_max at epoch 0 to lr_min at the last epoch."""
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1 + math.cos(math.pi * epoch / cfg.epochs))


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def state(self) -> dict:
        return {"t": self.t, "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}

    def load(self, state: dict) -> None:
        self.t = state["t"]
        self.m = [m.copy() for m in state["m"]]
        self.v = [v.copy() for v in state["v"]]


def augment(frames: np.ndarray, events, rng: np.random.Generator, pad: int = PAD_FRAMES):
    """Random crop before the first keyword, then zero frames on both sides."""
    events = sorted(events, key=lambda e: e.b)
    crop = 0
    if events and rng is not None:
        limit = math.ceil(round(events[0].b / FRAME_S, 6))  # crop strictly before the onset
        if limit > 0:
            crop = int(rng.integers(0, limit))
    shift = pad * FRAME_S - crop * FRAME_S
    z = np.zeros((pad, frames.shape[1]), frames.dtype)
    out = np.concatenate([z, frames[crop:], z])
    return out, [GroundTruthEvent(e.class_id, e.b + shift, e.e + shift) for e in events], crop * FRAME_S


def utterance_batch(records, n_classes: int, rng, label_cfg: LabelConfig):
    xs, labels = [], []
    for rec in records:
        frames, events, _ = augment(rec.frames(), rec.events, rng)
        wb = window_offline(frames)
        xs.append(wb.x)
        labels.append(make_labels(events, 6 * len(wb.x), n_classes, label_cfg))
    return np.concatenate(xs), LabelTensors.concat(labels)


def feature_stats(records) -> tuple[np.ndarray, np.ndarray]:
    f = np.concatenate([r.frames() for r in records])
    return f.mean(axis=0), f.std(axis=0)


@dataclass
class EvalResult:
    report: object
    proposals: dict
    skip: dict = field(default_factory=dict)
    f_open: float = 0.0


SPEECH_COVERAGE = 0.5  # share of a keyword inside a window for it to count as keyword-bearing


def window_tags(n_windows: int, events) -> list[str]:
    """Tag each padded window "speech", "noise" or "partial".

    "speech": at least ``SPEECH_COVERAGE`` of some keyword lies inside the
    window; "noise": no keyword overlaps it at all; "partial" otherwise.
    Event times are on the unpadded timeline.
    """
    tags = []
    for w in range(n_windows):
        start = w * SHIFT_FRAMES * FRAME_S - PAD_S
        end = start + WINDOW_FRAMES * FRAME_S
        cover = max([(min(end, e.e) - max(start, e.b)) / (e.e - e.b) for e in events] + [0.0])
        tags.append("speech" if cover >= SPEECH_COVERAGE else "noise" if cover <= 0 else "partial")
    return tags


def evaluate(model: KwsModel, records, dec_cfg: DecoderConfig | None = None, force=None, mtwv_floor: float = 0.5) -> EvalResult:
    """Decode every utterance (offline, batch size one) and score against its alignments."""
    dec_cfg = dec_cfg or DecoderConfig()
    low_cfg = DecoderConfig(theta=min(mtwv_floor, dec_cfg.theta), nms_iou=dec_cfg.nms_iou, R=dec_cfg.R, S=dec_cfg.S)
    ledger = model.ledger
    ledger.reset()
    props, cands, gts = {}, {}, {}
    total_s = 0.0
    opened = []
    stats = DecodeStats()
    for rec in records:
        frames = rec.frames()
        n_w = len(window_offline(np.zeros((frames.shape[0] + 2 * PAD_FRAMES, 1))).x)
        tags = window_tags(n_w, rec.events)
        outs = []
        padded = window_offline(np.concatenate([np.zeros((PAD_FRAMES, frames.shape[1]), frames.dtype), frames, np.zeros((PAD_FRAMES, frames.shape[1]), frames.dtype)]))
        for i, w in enumerate(padded.x):
            outs.append(model.predict_window(w, force=force, tag=tags[i]))
        opened.extend(o.gates.mean() for o in outs)
        found = decode_steps(outs, 0, dec_cfg, stats)
        props[rec.id] = sorted((p.shifted(-PAD_S) for p in nms(found, dec_cfg.nms_iou)), key=time_order)
        low = decode_steps(outs, 0, low_cfg)
        cands[rec.id] = [p.shifted(-PAD_S) for p in nms(low, low_cfg.nms_iou)]
        gts[rec.id] = list(rec.events)
        total_s += rec.duration_s or frames.shape[0] * FRAME_S
    match = match_dataset(props, gts)
    report = compute_report(match, total_s, ledger, mtwv(cands, gts, total_s))
    skip = {}
    for tag in ("speech", "noise", "partial"):
        if tag in ledger.tags:
            skip[tag] = mac_report(ledger, tag)["skip_fraction_gateable"]
    report.extra = {"skip_by_region": skip, "rejected_nonfinite": stats.rejected_nonfinite}
    return EvalResult(report, props, skip, float(np.mean(opened)) if opened else 0.0)


def save_train_state(path, model: KwsModel, opt: Adam, rng: np.random.Generator, epoch: int, history: list, cfg: TrainConfig) -> None:
    """Checkpoint plus optimizer moments, RNG state and epoch, for exact resumption."""
    arrays = {"__format__": np.array([CHECKPOINT_VERSION]), "__config__": np.array(json.dumps(model.config_dict()))}
    arrays.update(model.state_dict())
    for i, (m, v) in enumerate(zip(opt.m, opt.v)):
        arrays[f"__adam_m.{i}"] = m
        arrays[f"__adam_v.{i}"] = v
    meta = {"epoch": epoch, "adam_t": opt.t, "rng": rng.bit_generator.state, "history": history, "train_config": asdict(cfg)}
    arrays["__train__"] = np.array(json.dumps(meta, default=_jsonable))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    raise TypeError(f"not serialisable: {type(v)}")


def load_train_state(path):
    """Returns (model, state dict for :func:`train`'s ``resume``)."""
    model = load_checkpoint(path)
    with np.load(path, allow_pickle=False) as data:
        if "__train__" not in data.files:
            raise ValueError(f"{path}: no training state (plain checkpoint)")
        meta = json.loads(str(data["__train__"]))
        n = sum(1 for k in data.files if k.startswith("__adam_m."))
        meta["adam_m"] = [data[f"__adam_m.{i}"] for i in range(n)]
        meta["adam_v"] = [data[f"__adam_v.{i}"] for i in range(n)]
    return model, meta


def train(
    dataset,
    model: KwsModel,
    cfg: TrainConfig,
    label_cfg: LabelConfig = LabelConfig(),
    dev_split: str = "dev",
    checkpoint_path=None,
    history_path=None,
    resume: dict | None = None,
    stop_after: int | None = None,
):
    """Train ``model`` in place and return the per-epoch history.

    ``resume`` is the state from :func:`load_train_state`; ``stop_after``
    ends the run early after that many epochs (the schedule still spans
    ``cfg.epochs``).  With ``checkpoint_path`` set, the final state is saved
    with optimizer and RNG state so training can continue bit-exactly.
    """
    rng = np.random.default_rng(cfg.seed)
    records = dataset["train"]
    dev = dataset[dev_split]
    C = model.n_classes
    if not model.extra.get("feature_stats"):
        mean, std = feature_stats(records)
        model.encoder.set_feature_stats(mean, std)
        model.extra["feature_stats"] = True

    params = model.encoder.gate_parameters() if cfg.finetune_gates else model.parameters()
    opt = Adam(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    history: list[dict] = []
    first = 0
    if resume is not None:
        opt.load({"t": resume["adam_t"], "m": resume["adam_m"], "v": resume["adam_v"]})
        rng.bit_generator.state = resume["rng"]
        history = list(resume["history"])
        first = resume["epoch"]
    gated = model.encoder_cfg.gating
    dec_cfg = DecoderConfig.from_labels(label_cfg, theta=cfg.theta)
    last_epoch = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    hist_fh = open(history_path, "a" if resume else "w") if history_path else None
    epoch = first
    # a frozen backbone keeps its inference-time normalisation while the gates learn
    freeze_batchnorm(model, cfg.finetune_gates)
    try:
        for epoch in range(first, last_epoch):
            lr = lr_at(epoch, cfg)
            gates_on = gated and epoch >= cfg.gate_pretrain_epochs
            force = None if gates_on else ("open" if gated else None)
            order = rng.permutation(len(records))
            sums = {"total": 0.0, "det": 0.0, "class": 0.0, "loc": 0.0, "gate": 0.0, "f_open": 0.0}
            steps = 0
            for start in range(0, len(order), cfg.batch_utterances):
                batch = [records[i] for i in order[start : start + cfg.batch_utterances]]
                x, labels = utterance_batch(batch, C, rng, label_cfg)
                with nx.Tape() as tape:
                    preds, enc = model.forward(x, TRAIN, rng, force)
                    loss, parts = total_loss(preds, labels, enc.f_open if gates_on else None, cfg.lam)
                if not np.isfinite(parts["total"]):
                    snap = None
                    if checkpoint_path:
                        snap = str(checkpoint_path) + ".nonfinite"
                        save_checkpoint(model, snap)
                    raise TrainingError(f"non-finite loss at epoch {epoch + 1} step {steps}: {parts} (snapshot: {snap})")
                model.zero_grad()
                tape.backward(loss)
                opt.step(lr)
                for k in ("total", "det", "class", "loc", "gate"):
                    sums[k] += parts[k]
                sums["f_open"] += float(enc.f_open.data)
                steps += 1
            row = {"epoch": epoch + 1, "lr": lr, "gates_active": gates_on}
            row.update({("loss" if k == "total" else k): v / max(steps, 1) for k, v in sums.items()})
            final = epoch + 1 == cfg.epochs
            if dev and (final or (epoch + 1) % max(cfg.validate_every, 1) == 0):
                res = evaluate(model, dev, dec_cfg, force=force)
                row["val_f1"] = res.report.f1
                row["val_f_open"] = res.f_open
                row["val_skip"] = res.skip
            history.append(row)
            log.info("epoch %d %s", epoch + 1, json.dumps(row, default=_jsonable))
            if hist_fh:
                hist_fh.write(json.dumps(row, default=_jsonable) + "\n")
                hist_fh.flush()
        epoch = last_epoch
    finally:
        freeze_batchnorm(model, False)
        if hist_fh:
            hist_fh.close()
    model.extra["train_config"] = asdict(cfg)
    if checkpoint_path:
        save_train_state(checkpoint_path, model, opt, rng, epoch, history, cfg)
    return history
