"""Conformer encoder whose four residual modules per block carry binary gates.

Each module's residual branch is scaled by a per-example gate ``g`` in {0, 1}
(``x <- x + g * module(x)``).  A gate is a two-way linear classifier on the
time-averaged module input; ``p_keep`` comes from its softmax.  In training
the gate is drawn with a straight-through Gumbel-Softmax, at inference it is
``p_keep > beta`` and a closed gate skips the module body entirely.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .layers import BatchNorm, Conv2d, LayerNorm, Linear, Module, dropout
from .numerics import ContractError, Tensor

TRAIN = "train"
INFER = "infer"
MODULE_KINDS = ("ffn", "mhsa", "conv", "ffn")


class NoDataError(RuntimeError):
    pass


@dataclass
class EncoderConfig:
    hidden: int = 80
    blocks: int = 8
    heads: int = 4
    conv_kernel: int = 15
    ffn_expansion: int = 4
    subsample_channels: int = 0  # 0 means "same as hidden"
    n_mels: int = 40
    dropout: float = 0.1
    gating: bool = True
    tau: float = 1.0
    beta: float = 0.5

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if self.conv_kernel % 2 == 0:
            raise ValueError(f"conv_kernel must be odd, got {self.conv_kernel}")

    @property
    def channels(self) -> int:
        return self.subsample_channels or self.hidden

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "L": dict(hidden=80, blocks=8, conv_kernel=15),
    "XS": dict(hidden=40, blocks=3, conv_kernel=9),
}


def _conv_out(n: int) -> int:
    return (n - 3) // 2 + 1


def subsampled_length(t_in: int) -> int:
    """Time steps left after two unpadded 3x3 stride-2 convolutions."""
    if t_in < 7:
        raise ContractError(f"subsample: need at least 7 input frames, got {t_in}")
    return _conv_out(_conv_out(t_in))


# --- analytic MAC model ----------------------------------------------------


def module_macs(cfg: EncoderConfig, kind: str, steps: int) -> int:
    """MACs of one gateable module on one window (matmuls, convs, norm affines)."""
    H, T = cfg.hidden, steps
    norm = T * H
    if kind == "ffn":
        return norm + 2 * T * H * (cfg.ffn_expansion * H)
    if kind == "mhsa":
        return norm + 4 * T * H * H + 2 * T * T * H
    if kind == "conv":
        return norm + 2 * T * H * H + T * H * cfg.conv_kernel + T * H + T * H * H
    raise KeyError(kind)


def subsample_macs(cfg: EncoderConfig, t_in: int) -> int:
    C = cfg.channels
    t1, f1 = _conv_out(t_in), _conv_out(cfg.n_mels)
    t2, f2 = _conv_out(t1), _conv_out(f1)
    return t1 * f1 * 9 * C + t2 * f2 * 9 * C * C + t2 * f2 * C * cfg.hidden


def ungated_macs(cfg: EncoderConfig, t_in: int, with_gates: bool | None = None) -> int:
    """Per-window MACs outside the gateable modules: subsampling, gates, block norms."""
    T = subsampled_length(t_in)
    if with_gates is None:
        with_gates = cfg.gating
    gates = 4 * cfg.blocks * 2 * cfg.hidden if with_gates else 0
    return subsample_macs(cfg, t_in) + gates + cfg.blocks * T * cfg.hidden


@dataclass
class _Counts:
    executed: int = 0
    gateable: int = 0
    ungated: int = 0
    windows: int = 0


@dataclass
class MacLedger:
    """Accumulates executed vs. skippable MACs, optionally split by caller tags."""

    executed_macs: int = 0
    gateable_total_macs: int = 0
    ungated_total_macs: int = 0
    windows: int = 0
    tags: dict = field(default_factory=dict)

    def add(self, executed: int, gateable: int, ungated: int, tag: str | None = None) -> None:
        self.executed_macs += executed
        self.gateable_total_macs += gateable
        self.ungated_total_macs += ungated
        self.windows += 1
        if tag is not None:
            c = self.tags.setdefault(tag, _Counts())
            c.executed += executed
            c.gateable += gateable
            c.ungated += ungated
            c.windows += 1

    def reset(self) -> None:
        self.executed_macs = self.gateable_total_macs = self.ungated_total_macs = self.windows = 0
        self.tags.clear()


def mac_report(ledger: MacLedger, tag: str | None = None) -> dict:
    if tag is None:
        c = _Counts(ledger.executed_macs, ledger.gateable_total_macs, ledger.ungated_total_macs, ledger.windows)
    else:
        c = ledger.tags.get(tag, _Counts())
    if c.windows == 0:
        raise NoDataError(f"no windows recorded{'' if tag is None else f' for tag {tag!r}'}")
    whole = c.gateable + c.ungated
    return {
        "windows": c.windows,
        "skip_fraction_gateable": 1.0 - c.executed / c.gateable if c.gateable else 0.0,
        "skip_fraction_whole_encoder": 1.0 - (c.executed + c.ungated) / whole,
    }


# --- gates -----------------------------------------------------------------

GATE_KEEP_BIAS = 1.0  # gates start mostly open (p_keep ~ 0.73 for small inputs)


@dataclass
class GateDecision:
    p_keep: np.ndarray
    p_skip: np.ndarray
    g: np.ndarray  # int (B,)
    mode: str
    g_tensor: Tensor | None = None  # differentiable gate values in training


def gate_forward(x: Tensor, gate: Linear, mode: str, beta: float = 0.5, tau: float = 1.0, rng=None) -> GateDecision:
    logits = gate(nx.mean(x, axis=1))
    p = nx.softmax(logits)
    p_keep, p_skip = p.data[:, 0].copy(), p.data[:, 1].copy()
    if mode == INFER:
        g = (p_keep > beta).astype(np.int64)
        return GateDecision(p_keep, p_skip, g, mode)
    u = rng.random(logits.shape)
    gumbel = -np.log(-np.log(np.clip(u, 1e-20, 1.0)) + 1e-20).astype(logits.data.dtype)
    soft = nx.softmax(nx.scale(nx.add(logits, gumbel), 1.0 / tau))
    hard = np.zeros_like(soft.data)
    hard[np.arange(hard.shape[0]), soft.data.argmax(axis=1)] = 1.0
    g_tensor = nx.getitem(nx.straight_through(hard, soft), (slice(None), 0))
    return GateDecision(p_keep, p_skip, hard[:, 0].astype(np.int64), mode, g_tensor)


# --- conformer modules -----------------------------------------------------


class FeedForward(Module):
    def __init__(self, cfg: EncoderConfig, rng):
        self.p = cfg.dropout
        self.norm = LayerNorm(cfg.hidden)
        self.up = Linear(cfg.hidden, cfg.ffn_expansion * cfg.hidden, rng)
        self.down = Linear(cfg.ffn_expansion * cfg.hidden, cfg.hidden, rng)

    def __call__(self, x: Tensor, training: bool, rng=None) -> Tensor:
        h = nx.swish(self.up(self.norm(x)))
        h = dropout(h, self.p, rng, training)
        return dropout(self.down(h), self.p, rng, training)


class SelfAttention(Module):
    def __init__(self, cfg: EncoderConfig, rng):
        self.p = cfg.dropout
        self.heads = cfg.heads
        self.norm = LayerNorm(cfg.hidden)
        self.q = Linear(cfg.hidden, cfg.hidden, rng)
        self.k = Linear(cfg.hidden, cfg.hidden, rng)
        self.v = Linear(cfg.hidden, cfg.hidden, rng)
        self.out = Linear(cfg.hidden, cfg.hidden, rng)

    def __call__(self, x: Tensor, training: bool, rng=None) -> Tensor:
        B, T, H = x.shape
        d = H // self.heads
        h = self.norm(x)

        def split(t):  # (B, T, H) -> (B, heads, T, d)
            return nx.transpose(nx.reshape(t, (B, T, self.heads, d)), (0, 2, 1, 3))

        q, k, v = split(self.q(h)), split(self.k(h)), split(self.v(h))
        scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
        ctx = nx.matmul(nx.softmax(scores), v)
        ctx = nx.reshape(nx.transpose(ctx, (0, 2, 1, 3)), (B, T, H))
        return dropout(self.out(ctx), self.p, rng, training)


class ConvModule(Module):
    def __init__(self, cfg: EncoderConfig, rng):
        self.p = cfg.dropout
        H, k = cfg.hidden, cfg.conv_kernel
        self.norm = LayerNorm(H)
        self.pw_in = Linear(H, 2 * H, rng)
        self.dw_weight = Tensor(rng.uniform(-1, 1, size=(k, H)).astype(np.float32) / math.sqrt(k), requires_grad=True)
        self.dw_bias = Tensor(np.zeros(H, np.float32), requires_grad=True)
        self.bn = BatchNorm(H)
        self.pw_out = Linear(H, H, rng)

    def __call__(self, x: Tensor, training: bool, rng=None) -> Tensor:
        h = nx.glu(self.pw_in(self.norm(x)))
        h = nx.add(nx.conv1d_depthwise(h, self.dw_weight), self.dw_bias)
        h = nx.swish(self.bn(h, training))
        return dropout(self.pw_out(h), self.p, rng, training)


class ConformerBlock(Module):
    def __init__(self, cfg: EncoderConfig, rng, gate_rng=None):
        self.cfg = cfg
        self.modules = [FeedForward(cfg, rng), SelfAttention(cfg, rng), ConvModule(cfg, rng), FeedForward(cfg, rng)]
        self.gates = []
        if cfg.gating:
            for _ in MODULE_KINDS:
                gate = Linear(cfg.hidden, 2, gate_rng if gate_rng is not None else rng)
                gate.bias.data[0] = GATE_KEEP_BIAS
                self.gates.append(gate)
        self.norm = LayerNorm(cfg.hidden)

    def __call__(self, x: Tensor, mode: str, rng=None, force: str | None = None) -> tuple[Tensor, list[GateDecision]]:
        """Run the four gated residual modules and the closing norm.

        ``force`` is None (gates decide), "open" or "closed".
        """
        cfg = self.cfg
        B = x.shape[0]
        training = mode == TRAIN
        decisions = []
        for m, module in enumerate(self.modules):
            half = MODULE_KINDS[m] == "ffn"
            dec = None
            if cfg.gating and force is None:
                dec = gate_forward(x, self.gates[m], mode, cfg.beta, cfg.tau, rng)
                g = dec.g
            else:
                g = np.full(B, 0 if force == "closed" else 1, np.int64)
                dec = GateDecision(g.astype(float), 1.0 - g, g, mode)
            decisions.append(dec)
            if not g.any() and dec.g_tensor is None:
                continue  # a closed training gate still needs the module output for its gradient
            if training:
                y = module(x, True, rng)
                if half:
                    y = nx.scale(y, 0.5)
                if dec.g_tensor is not None:
                    y = nx.mul(y, nx.reshape(dec.g_tensor, (B, 1, 1)))
                x = nx.add(x, y)
            elif g.all():
                y = module(x, False)
                x = nx.add(x, nx.scale(y, 0.5) if half else y)
            else:
                keep = np.flatnonzero(g)
                sub = Tensor(x.data[keep])
                y = module(sub, False)
                out = x.data.copy()
                out[keep] = nx.add(sub, nx.scale(y, 0.5) if half else y).data
                x = Tensor(out)
        return self.norm(x), decisions


class Subsampling(Module):
    """Two 3x3 stride-2 convolutions, then a projection of (freq, channel) to H."""

    def __init__(self, cfg: EncoderConfig, rng):
        C = cfg.channels
        self.conv1 = Conv2d(1, C, 3, 2, rng)
        self.conv2 = Conv2d(C, C, 3, 2, rng)
        self.proj = Linear(_conv_out(_conv_out(cfg.n_mels)) * C, cfg.hidden, rng)

    def __call__(self, x: Tensor) -> Tensor:
        B, T, F = x.shape
        subsampled_length(T)
        h = nx.relu(self.conv1(nx.reshape(x, (B, T, F, 1))))
        h = nx.relu(self.conv2(h))
        b, t, f, c = h.shape
        return self.proj(nx.reshape(h, (b, t, f * c)))


def positional_encoding(steps: int, dim: int) -> np.ndarray:
    pos = np.arange(steps)[:, None]
    div = np.exp(np.arange(0, dim, 2) * (-math.log(10000.0) / dim))
    pe = np.zeros((steps, dim))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div)[:, : dim // 2]
    return pe.astype(np.float32)


@dataclass
class EncodeResult:
    z: Tensor
    f_open: Tensor
    gates: np.ndarray  # (B, 4 * N_z) binary decisions
    p_keep: np.ndarray  # (B, 4 * N_z)


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, gate_rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.feat_mean = Tensor(np.zeros(cfg.n_mels, np.float32))
        self.feat_std = Tensor(np.ones(cfg.n_mels, np.float32))
        self.subsample = Subsampling(cfg, rng)
        self.blocks = [ConformerBlock(cfg, rng, gate_rng) for _ in range(cfg.blocks)]
        self.ledger = MacLedger()

    def gate_parameters(self) -> list[Tensor]:
        return [t for blk in self.blocks for gate in blk.gates for t in gate.parameters()]

    def set_feature_stats(self, mean: np.ndarray, std: np.ndarray) -> None:
        self.feat_mean.data = np.asarray(mean, np.float32)
        self.feat_std.data = np.maximum(np.asarray(std, np.float32), 1e-3)

    def __call__(self, x, mode: str = INFER, rng=None, force: str | None = None, tags=None) -> EncodeResult:
        return self.encode(x, mode, rng, force, tags)

    def encode(self, x, mode: str = INFER, rng=None, force: str | None = None, tags=None) -> EncodeResult:
        """Map (B, T_in, n_mels) frames to (B, T_z, H) encodings.

        The MAC ledger gets one entry per batch element; ``tags`` optionally
        labels each element (e.g. "speech"/"noise") for split reporting.
        """
        cfg = self.cfg
        x = nx.as_tensor(x)
        if x.ndim != 3 or x.shape[2] != cfg.n_mels:
            raise ContractError(f"encode: expected (B, T, {cfg.n_mels}), got {x.shape}")
        B, t_in, _ = x.shape
        training = mode == TRAIN
        dt = x.data.dtype
        scale = (1.0 / self.feat_std.data).astype(dt)
        h = nx.mul(nx.sub(x, self.feat_mean.data.astype(dt)), scale)
        h = self.subsample(h)
        T = h.shape[1]
        h = nx.add(h, positional_encoding(T, cfg.hidden).astype(dt))
        h = dropout(h, cfg.dropout, rng, training)

        gate_rows, keep_rows, g_tensors = [], [], []
        for blk in self.blocks:
            h, decisions = blk(h, mode, rng, force)
            for dec in decisions:
                gate_rows.append(dec.g)
                keep_rows.append(dec.p_keep)
                g_tensors.append(dec.g_tensor)
        gates = np.stack(gate_rows, axis=1)
        p_keep = np.stack(keep_rows, axis=1)

        if all(t is not None for t in g_tensors) and g_tensors:
            f_open = nx.scale(nx.sum(nx.concat([nx.reshape(t, (B, 1)) for t in g_tensors], axis=1)), 1.0 / gates.size)
        else:
            f_open = Tensor(np.asarray(gates.mean(), dt))

        costs = np.array([module_macs(cfg, k, T) for _ in self.blocks for k in MODULE_KINDS])
        ungated = ungated_macs(cfg, t_in, with_gates=cfg.gating and force is None)
        for b in range(B):
            self.ledger.add(int(gates[b] @ costs), int(costs.sum()), ungated, None if tags is None else tags[b])
        return EncodeResult(h, f_open, gates, p_keep)


def measure_macs(cfg: EncoderConfig, force: str | None = None, seed: int = 0, t_in: int = 120) -> tuple[int, int]:
    """(ledger MACs, instrumented MACs) for one inference window through a fresh encoder."""
    rng = np.random.default_rng(seed)
    enc = Encoder(cfg, rng)
    x = rng.standard_normal((1, t_in, cfg.n_mels)).astype(np.float32)
    counter = nx.mac_counter()
    counter.reset()
    enc.encode(x, INFER, force=force)
    led = enc.ledger
    return led.executed_macs + led.ungated_total_macs, counter.count
