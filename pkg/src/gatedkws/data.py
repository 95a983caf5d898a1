"""Datasets on disk and a synthetic commands-over-noise generator.

Layout::

    root/lexicon.txt                 one word per line; line n is class id n
    root/<split>/lexicon.txt         copy of the lexicon
    root/<split>/audio/<id>.wav      16-bit mono 16 kHz PCM
    root/<split>/alignments.jsonl    {"utterance_id", "word", "begin_s", "end_s"} per line

Every WAV in ``audio/`` is an utterance; utterances without alignment lines
contain no keyword.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .frontend import SAMPLE_RATE, compute_log_mel, read_wav, write_wav
from .supervision import GroundTruthEvent

SPLITS = ("train", "dev", "test")
DEFAULT_WORDS = ("alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliet")


class DatasetError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass
class UtteranceRecord:
    id: str
    audio_path: Path
    events: list  # GroundTruthEvent, sorted by begin time
    split: str
    duration_s: float = 0.0
    words: list = field(default_factory=list)  # lexicon word per event
    _frames: np.ndarray | None = field(default=None, repr=False, compare=False)

    def frames(self) -> np.ndarray:
        if self._frames is None:
            self._frames = compute_log_mel(read_wav(self.audio_path)).frames
        return self._frames


@dataclass
class Dataset:
    lexicon: list
    splits: dict  # split -> list[UtteranceRecord]

    @property
    def n_classes(self) -> int:
        return len(self.lexicon)

    def __getitem__(self, split: str) -> list:
        return self.splits.get(split, [])


def read_lexicon(path) -> list[str]:
    words = [ln.strip() for ln in Path(path).read_text().splitlines()]
    return [w for w in words if w]


def load_dataset(root, lexicon_path=None) -> Dataset:
    """Load every split under ``root``; out-of-lexicon words are dropped."""
    root = Path(root)
    lexicon = read_lexicon(lexicon_path or root / "lexicon.txt")
    class_of = {w: i + 1 for i, w in enumerate(lexicon)}
    splits = {}
    for split in SPLITS:
        sdir = root / split
        if not sdir.is_dir():
            continue
        audio = {p.stem: p for p in sorted((sdir / "audio").glob("*.wav"))}
        aligned: dict[str, list] = {}
        align_path = sdir / "alignments.jsonl"
        if align_path.exists():
            for lineno, line in enumerate(align_path.read_text().splitlines(), 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    row = (str(rec["utterance_id"]), str(rec["word"]), float(rec["begin_s"]), float(rec["end_s"]))
                except (ValueError, KeyError, TypeError) as exc:
                    raise DatasetError(f"{align_path}:{lineno}: malformed alignment ({exc})") from None
                aligned.setdefault(row[0], []).append(row)
        missing = sorted(set(aligned) - set(audio))
        if missing:
            raise DatasetError(f"{split}: alignments reference missing audio: {', '.join(missing)}")
        records = []
        for uid, path in audio.items():
            n = len(read_wav(path))
            duration = n / SAMPLE_RATE
            events, words = [], []
            for _, word, b, e in sorted(aligned.get(uid, []), key=lambda r: r[2]):
                if e > duration + 1e-6 or b < 0 or e <= b:
                    raise DatasetError(f"{split}/{uid}: alignment ({word}, {b}, {e}) outside audio of {duration:.3f} s")
                if word in class_of:
                    events.append(GroundTruthEvent(class_of[word], b, e))
                    words.append(word)
            records.append(UtteranceRecord(uid, path, events, split, duration, words))
        splits[split] = records
    return Dataset(lexicon, splits)


# --- synthetic data --------------------------------------------------------


@dataclass
class SynthConfig:
    n_classes: int = 5
    min_keyword_s: float = 0.3
    max_keyword_s: float = 0.8
    noise: str = "babble"  # "white" or "babble"
    snr_db_min: float = 10.0
    snr_db_max: float = 40.0
    utterance_s: float = 3.0
    density: float = 1.0  # keywords per keyword-bearing utterance
    noise_only_fraction: float = 0.2
    noise_rms: float = 0.003
    seed: int = 0
    n_train: int = 320
    n_dev: int = 40
    n_test: int = 40

    def __post_init__(self):
        if self.n_classes > len(DEFAULT_WORDS):
            raise ValueError(f"at most {len(DEFAULT_WORDS)} synthetic classes")
        if self.noise not in ("white", "babble"):
            raise ValueError(f"noise must be 'white' or 'babble', got {self.noise!r}")

    @property
    def words(self) -> list[str]:
        return list(DEFAULT_WORDS[: self.n_classes])


def class_base_hz(k: int) -> float:
    """Lowest frequency of class k (0-based); bands [f, 1.25 f] never overlap."""
    return 300.0 * 1.6**k


def keyword_duration(cfg: SynthConfig, k: int) -> float:
    if cfg.n_classes == 1:
        return cfg.min_keyword_s
    return cfg.min_keyword_s + (cfg.max_keyword_s - cfg.min_keyword_s) * k / (cfg.n_classes - 1)


def keyword_template(cfg: SynthConfig, k: int) -> np.ndarray:
    """Two crossing chirps inside class k's band, tapered at both ends."""
    n = int(round(keyword_duration(cfg, k) * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    dur = n / SAMPLE_RATE
    f0 = class_base_hz(k)

    def chirp(fa, fb):
        phase = 2 * math.pi * (fa * t + 0.5 * (fb - fa) / dur * t**2)
        return np.sin(phase)

    sig = chirp(f0, 1.2 * f0) + 0.7 * chirp(1.25 * f0, 1.05 * f0)
    ramp = min(int(0.02 * SAMPLE_RATE), n // 4)
    env = np.ones(n)
    taper = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
    env[:ramp] = taper
    env[n - ramp :] = taper[::-1]
    return sig * env


def _noise(cfg: SynthConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    white = rng.standard_normal(n)
    if cfg.noise == "white":
        out = white
    else:
        # speech-band coloured noise with slow syllable-rate amplitude modulation
        spec = np.fft.rfft(white)
        f = np.fft.rfftfreq(n, 1 / SAMPLE_RATE)
        shape = 1.0 / np.sqrt(1.0 + (f / 500.0) ** 2) * (f > 80)
        out = np.fft.irfft(spec * shape, n)
        t = np.arange(n) / SAMPLE_RATE
        mod = 1.0 + 0.5 * np.sin(2 * math.pi * rng.uniform(2, 5) * t + rng.uniform(0, 2 * math.pi))
        out = out * mod
    return out / (np.sqrt(np.mean(out**2)) + 1e-12) * cfg.noise_rms


def synth_utterance(cfg: SynthConfig, rng: np.random.Generator, n_keywords: int, templates=None):
    """One utterance: (float samples, list of (class_id, b, e, snr_db))."""
    templates = templates or [keyword_template(cfg, k) for k in range(cfg.n_classes)]
    n = int(round(cfg.utterance_s * SAMPLE_RATE))
    audio = _noise(cfg, n, rng)
    placed: list[tuple[int, int, int, float]] = []
    for _ in range(n_keywords):
        k = int(rng.integers(cfg.n_classes))
        tpl = templates[k]
        if tpl.size > n:
            raise GenerationError(f"keyword of {tpl.size} samples does not fit in {n}")
        for _attempt in range(200):
            start = int(rng.integers(0, n - tpl.size + 1))
            end = start + tpl.size
            if all(end <= s or start >= e for _, s, e, _ in placed):
                break
        else:
            raise GenerationError(f"cannot place {n_keywords} keywords without overlap in {cfg.utterance_s} s")
        snr = float(rng.uniform(cfg.snr_db_min, cfg.snr_db_max))
        gain = cfg.noise_rms * 10 ** (snr / 20) / np.sqrt(np.mean(tpl**2))
        audio[start:end] += gain * tpl
        placed.append((k + 1, start, end, snr))
    placed.sort(key=lambda p: p[1])
    return audio, [(c, s / SAMPLE_RATE, e / SAMPLE_RATE, snr) for c, s, e, snr in placed]


def _n_keywords(cfg: SynthConfig, rng) -> int:
    if rng.random() < cfg.noise_only_fraction:
        return 0
    whole = int(math.floor(cfg.density))
    return whole + int(rng.random() < cfg.density - whole)


def generate_synthetic(cfg: SynthConfig, root, counts: dict | None = None) -> Dataset:
    """Write a synthetic dataset to ``root`` and return it loaded back."""
    root = Path(root)
    counts = counts or {"train": cfg.n_train, "dev": cfg.n_dev, "test": cfg.n_test}
    rng = np.random.default_rng(cfg.seed)
    templates = [keyword_template(cfg, k) for k in range(cfg.n_classes)]
    words = cfg.words
    root.mkdir(parents=True, exist_ok=True)
    lex = "".join(w + "\n" for w in words)
    (root / "lexicon.txt").write_text(lex)
    for split in SPLITS:
        sdir = root / split
        (sdir / "audio").mkdir(parents=True, exist_ok=True)
        (sdir / "lexicon.txt").write_text(lex)
        lines = []
        for i in range(counts.get(split, 0)):
            uid = f"{split}_{i:05d}"
            audio, events = synth_utterance(cfg, rng, _n_keywords(cfg, rng), templates)
            write_wav(sdir / "audio" / f"{uid}.wav", audio)
            for c, b, e, snr in events:
                rec = {"utterance_id": uid, "word": words[c - 1], "begin_s": b, "end_s": e, "snr_db": round(snr, 2)}
                lines.append(json.dumps(rec))
        (sdir / "alignments.jsonl").write_text("".join(ln + "\n" for ln in lines))
    (root / "synth_config.json").write_text(json.dumps(cfg.__dict__, indent=2))
    return load_dataset(root)
