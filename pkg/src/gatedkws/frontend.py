"""Log-Mel features and the 1.2 s / 240 ms encoder windowing."""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

SAMPLE_RATE = 16000
WIN_SAMPLES = 400  # 25 ms
HOP_SAMPLES = 160  # 10 ms
N_FFT = 512
N_MELS = 40
LOG_FLOOR = 1e-6

WINDOW_FRAMES = 120
SHIFT_FRAMES = 24
CARRY_FRAMES = WINDOW_FRAMES - SHIFT_FRAMES
FRAME_S = HOP_SAMPLES / SAMPLE_RATE


class UnsupportedFormatError(ValueError):
    pass


class EmptyFramesError(ValueError):
    pass


def read_wav(path) -> np.ndarray:
    """Read 16-bit mono 16 kHz PCM; returns int16 samples."""
    try:
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 1 or w.getsampwidth() != 2 or w.getframerate() != SAMPLE_RATE:
                raise UnsupportedFormatError(
                    f"{path}: need mono 16-bit {SAMPLE_RATE} Hz PCM, got "
                    f"{w.getnchannels()} ch / {8 * w.getsampwidth()} bit / {w.getframerate()} Hz"
                )
            raw = w.readframes(w.getnframes())
    except wave.Error as exc:
        raise UnsupportedFormatError(f"{path}: {exc}") from None
    return np.frombuffer(raw, dtype="<i2").copy()


def write_wav(path, samples: np.ndarray) -> None:
    if samples.dtype != np.int16:
        samples = np.clip(np.round(samples * 32767.0), -32768, 32767).astype(np.int16)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(SAMPLE_RATE)
        w.writeframes(samples.astype("<i2").tobytes())


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=None)
def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular HTK-scale filters over 0..sr/2, shape (n_fft // 2 + 1, n_mels)."""
    freqs = np.linspace(0, sr / 2, n_fft // 2 + 1)
    edges = _mel_to_hz(np.linspace(_hz_to_mel(0.0), _hz_to_mel(sr / 2), n_mels + 2))
    fb = np.zeros((freqs.size, n_mels))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[:, m] = np.maximum(0.0, np.minimum(up, down))
    fb.flags.writeable = False
    return fb.astype(np.float32)


@lru_cache(maxsize=None)
def _hann() -> np.ndarray:
    n = np.arange(WIN_SAMPLES)
    return (0.5 - 0.5 * np.cos(2 * math.pi * n / WIN_SAMPLES)).astype(np.float32)


def _as_float(pcm) -> np.ndarray:
    pcm = np.asarray(pcm)
    if pcm.dtype == np.int16:
        return pcm.astype(np.float32) / 32768.0
    return pcm.astype(np.float32)


def frames_from_segments(segments: np.ndarray) -> np.ndarray:
    """Log-Mel energies of (n, 400) sample segments.

    Rows are processed independently (no BLAS in the Mel projection) so a
    frame's value does not depend on how many frames are computed together.
    """
    spec = np.fft.rfft(segments * _hann(), n=N_FFT, axis=-1)
    power = (spec.real**2 + spec.imag**2).astype(np.float32)
    mel = np.einsum("tf,fm->tm", power, mel_filterbank(), optimize=False)
    return np.log(mel + np.float32(LOG_FLOOR)).astype(np.float32)


def num_frames(n_samples: int) -> int:
    return 0 if n_samples < WIN_SAMPLES else 1 + (n_samples - WIN_SAMPLES) // HOP_SAMPLES


@dataclass
class MelFrames:
    frames: np.ndarray  # (T_frames, 40)
    frame_stride_s: float = FRAME_S
    frame_window_s: float = WIN_SAMPLES / SAMPLE_RATE
    sample_rate_hz: int = SAMPLE_RATE

    def __len__(self):
        return self.frames.shape[0]


def compute_log_mel(pcm, sample_rate: int = SAMPLE_RATE) -> MelFrames:
    if sample_rate != SAMPLE_RATE:
        raise UnsupportedFormatError(f"sample rate {sample_rate} Hz not supported (need {SAMPLE_RATE})")
    x = _as_float(pcm)
    n = num_frames(x.size)
    if n == 0:
        raise EmptyFramesError(f"{x.size} samples is shorter than one {WIN_SAMPLES}-sample window")
    idx = np.arange(n)[:, None] * HOP_SAMPLES + np.arange(WIN_SAMPLES)[None, :]
    return MelFrames(frames_from_segments(x[idx]))


@dataclass
class WindowBatch:
    x: np.ndarray  # (N_w, 120, 40)
    origin_frame: np.ndarray  # (N_w,)
    window_len_frames: int = WINDOW_FRAMES
    shift_frames: int = SHIFT_FRAMES


def num_windows(t_frames: int) -> int:
    return 1 + math.ceil(max(0, t_frames - WINDOW_FRAMES) / SHIFT_FRAMES)


def window_offline(frames) -> WindowBatch:
    """Cut frames into overlapping 120-frame windows; the tail is zero-padded."""
    f = frames.frames if isinstance(frames, MelFrames) else np.asarray(frames)
    if f.shape[0] < 1:
        raise EmptyFramesError("no frames to window")
    n_w = num_windows(f.shape[0])
    total = (n_w - 1) * SHIFT_FRAMES + WINDOW_FRAMES
    padded = np.zeros((total, f.shape[1]), dtype=f.dtype)
    padded[: f.shape[0]] = f
    origins = np.arange(n_w) * SHIFT_FRAMES
    x = np.stack([padded[o : o + WINDOW_FRAMES] for o in origins])
    return WindowBatch(x, origins)


@dataclass
class StreamState:
    """Streaming window assembler: keeps the last 96 frames of the last window."""

    n_mels: int = N_MELS
    carry: np.ndarray | None = None
    pending: list = field(default_factory=list)
    frames_seen: int = 0
    windows_emitted: int = 0

    def feed(self, frames: np.ndarray) -> list[np.ndarray]:
        """Queue any number of frames; return every (1, 120, 40) window completed."""
        out = []
        for row in np.asarray(frames):
            self.pending.append(row)
            self.frames_seen += 1
            need = WINDOW_FRAMES if self.carry is None else SHIFT_FRAMES
            if len(self.pending) == need:
                chunk = np.stack(self.pending)
                self.pending = []
                win = stream_push(self, chunk)
                if win is not None:
                    out.append(win)
        return out

    def flush(self) -> list[np.ndarray]:
        """Zero-pad the tail so the windows match :func:`window_offline`."""
        if self.frames_seen == 0:
            return []
        total = (num_windows(self.frames_seen) - 1) * SHIFT_FRAMES + WINDOW_FRAMES
        missing = total - self.frames_seen
        if missing <= 0:
            return []
        dtype = self.pending[0].dtype if self.pending else self.carry.dtype
        return self.feed(np.zeros((missing, self.n_mels), dtype))


def stream_push(state: StreamState, new_frames: np.ndarray) -> np.ndarray | None:
    """Append 24 frames (or the initial 120) and emit the next window if complete."""
    new_frames = np.asarray(new_frames)
    if state.carry is None:
        buf = new_frames if not state.pending else np.concatenate([np.stack(state.pending), new_frames])
        if buf.shape[0] < WINDOW_FRAMES:
            state.pending = list(buf)
            return None
        state.pending = []
        window = buf[:WINDOW_FRAMES]
    else:
        window = np.concatenate([state.carry, new_frames[:SHIFT_FRAMES]])
    state.carry = window[SHIFT_FRAMES:].copy()
    state.windows_emitted += 1
    return window[None]


class StreamingFrontend:
    """Turns arbitrary-sized PCM chunks into log-Mel frames, frame-exact with offline."""

    def __init__(self):
        self._buf = np.zeros(0, np.float32)

    def push(self, pcm) -> np.ndarray:
        self._buf = np.concatenate([self._buf, _as_float(pcm)])
        n = num_frames(self._buf.size)
        if n == 0:
            return np.zeros((0, N_MELS), np.float32)
        idx = np.arange(n)[:, None] * HOP_SAMPLES + np.arange(WIN_SAMPLES)[None, :]
        frames = frames_from_segments(self._buf[idx])
        self._buf = self._buf[n * HOP_SAMPLES :]
        return frames
