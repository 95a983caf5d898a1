"""Command-line entry point: ``gatedkws <subcommand> [options]``.

Configuration is one nested JSON document (see ``--dump-config``); ``--config``
loads a partial or full document and ``--set section.key=value`` overrides
single values.  Exit codes: 0 success, 1 invalid input or failed check,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .data import DatasetError, SynthConfig, generate_synthetic, load_dataset
from .decoder import DecoderConfig, StreamingKws
from .encoder import PRESETS, EncoderConfig, measure_macs, module_macs, subsampled_length
from .frontend import WINDOW_FRAMES, UnsupportedFormatError, read_wav
from .numerics import ContractError
from .supervision import LabelConfig

log = logging.getLogger("gatedkws")

# toy-scale model defaults; "preset" ("L" or "XS") replaces the size fields
MODEL_DEFAULTS = {
    "preset": None,
    "hidden": 32,
    "blocks": 2,
    "heads": 2,
    "conv_kernel": 7,
    "ffn_expansion": 4,
    "subsample_channels": 8,
    "n_mels": 40,
    "dropout": 0.0,
    "gating": True,
    "tau": 1.0,
    "beta": 0.5,
    "mask_mode": "zero",
}


def _defaults_of(cls) -> dict:
    # the top-level "seed" feeds every section
    return {f.name: f.default for f in fields(cls) if f.name != "seed"}


def default_config() -> dict:
    from .trainer import TrainConfig

    return {
        "seed": 0,
        "data": _defaults_of(SynthConfig),
        "model": dict(MODEL_DEFAULTS),
        "train": _defaults_of(TrainConfig),
        "labels": asdict(LabelConfig()),
        "decoder": asdict(DecoderConfig()),
        "eval": {"split": "test", "mtwv_floor": 0.5},
    }


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw, default):
    if isinstance(raw, str) and not isinstance(default, str):
        try:
            raw = json.loads(raw)
        except json.JSONDecodeError:
            pass
    if default is None or raw is None:
        return raw
    if isinstance(default, bool):
        if not isinstance(raw, bool):
            raise ConfigError(f"{key}: expected true/false, got {raw!r}")
        return raw
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(raw, bool) or not isinstance(raw, int):
            raise ConfigError(f"{key}: expected an integer, got {raw!r}")
        return raw
    if isinstance(default, float):
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {raw!r}")
        return float(raw)
    if isinstance(default, str) and not isinstance(raw, str):
        raise ConfigError(f"{key}: expected a string, got {raw!r}")
    return raw


def valid_keys(cfg: dict, prefix: str = "") -> list[str]:
    out = []
    for k, v in cfg.items():
        if isinstance(v, dict):
            out += valid_keys(v, f"{prefix}{k}.")
        else:
            out.append(prefix + k)
    return out


def set_key(cfg: dict, dotted: str, value, defaults: dict) -> None:
    parts = dotted.split(".")
    node, dnode = cfg, defaults
    for p in parts[:-1]:
        if not isinstance(dnode.get(p), dict):
            raise ConfigError(f"unknown key {dotted!r}; valid keys: {', '.join(valid_keys(defaults))}")
        node, dnode = node[p], dnode[p]
    leaf = parts[-1]
    if leaf not in dnode or isinstance(dnode[leaf], dict):
        raise ConfigError(f"unknown key {dotted!r}; valid keys: {', '.join(valid_keys(defaults))}")
    node[leaf] = _coerce(dotted, value, dnode[leaf])


def _flatten(update: dict, prefix: str = ""):
    for k, v in update.items():
        if isinstance(v, dict):
            yield from _flatten(v, f"{prefix}{k}.")
        else:
            yield prefix + k, v


def merge(cfg: dict, update: dict, defaults: dict) -> None:
    for dotted, v in _flatten(update):
        set_key(cfg, dotted, v, defaults)


def resolve_config(args) -> dict:
    defaults = default_config()
    cfg = copy.deepcopy(defaults)
    if args.config:
        try:
            merge(cfg, json.loads(Path(args.config).read_text()), defaults)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        set_key(cfg, key.strip(), value, defaults)
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def encoder_config(cfg: dict) -> EncoderConfig:
    m = dict(cfg["model"])
    preset = m.pop("preset")
    m.pop("mask_mode")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"model.preset must be one of {sorted(PRESETS)}, got {preset!r}")
        m.update(PRESETS[preset])
    return EncoderConfig(**m)


def synth_config(cfg: dict) -> SynthConfig:
    return SynthConfig(**{**cfg["data"], "seed": cfg["seed"]})


def train_config(cfg: dict):
    from .trainer import TrainConfig

    return TrainConfig(**{**cfg["train"], "seed": cfg["seed"]})


def decoder_config(cfg: dict) -> DecoderConfig:
    return DecoderConfig(**cfg["decoder"])


# --- subcommands -----------------------------------------------------------


def cmd_gen_data(cfg, args) -> int:
    if not args.out:
        raise ConfigError("gen-data needs --out DIR")
    ds = generate_synthetic(synth_config(cfg), args.out)
    for split, recs in ds.splits.items():
        n_ev = sum(len(r.events) for r in recs)
        print(f"{split}: {len(recs)} utterances, {n_ev} keywords")
    return 0


def _warm_start(model, path) -> None:
    """Copy every tensor present in ``path`` (e.g. an ungated checkpoint into a gated model)."""
    from .model import load_checkpoint, transfer_weights

    try:
        transfer_weights(model, load_checkpoint(path))
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def cmd_train(cfg, args) -> int:
    from .model import KwsModel
    from .trainer import load_train_state, train

    if not args.data or not args.out:
        raise ConfigError("train needs --data DIR and --out CHECKPOINT")
    ds = load_dataset(args.data)
    tcfg = train_config(cfg)
    resume = None
    if args.resume:
        model, resume = load_train_state(args.resume)
    else:
        model = KwsModel(encoder_config(cfg), ds.n_classes, seed=cfg["seed"], mask_mode=cfg["model"]["mask_mode"])
        if args.checkpoint:
            _warm_start(model, args.checkpoint)
    model.extra["lexicon"] = ds.lexicon
    model.extra["run_config"] = cfg
    history_path = args.history or str(args.out) + ".history.jsonl"
    history = train(ds, model, tcfg, LabelConfig(**cfg["labels"]), checkpoint_path=args.out, history_path=history_path, resume=resume)
    last = history[-1] if history else {}
    print(json.dumps({"checkpoint": str(args.out), "history": history_path, "final": last}, default=float))
    return 0


def _print_report(report, skip) -> None:
    row = report.table_row()
    print("  ".join(f"{k:>9}" for k in row))
    print("  ".join(f"{v:9.4f}" for v in row.values()))
    print(f"skip fraction (whole encoder): {report.skip_fraction_whole_encoder:.4f}")
    for tag, v in skip.items():
        print(f"skip fraction on {tag} windows: {v:.4f}")
    for flag in report.flags:
        print(f"note: {flag}")


def cmd_eval(cfg, args) -> int:
    from .model import load_checkpoint
    from .trainer import evaluate

    if not args.data or not args.checkpoint:
        raise ConfigError("eval needs --data DIR and --checkpoint PATH")
    ds = load_dataset(args.data)
    split = args.split or cfg["eval"]["split"]
    if not ds[split]:
        raise ConfigError(f"split {split!r} is empty or missing under {args.data}")
    model = load_checkpoint(args.checkpoint)
    if model.n_classes != ds.n_classes:
        raise ConfigError(f"checkpoint has {model.n_classes} classes, lexicon has {ds.n_classes}")
    res = evaluate(model, ds[split], decoder_config(cfg), mtwv_floor=cfg["eval"]["mtwv_floor"])
    _print_report(res.report, res.skip)
    if args.out:
        Path(args.out).write_text(json.dumps(res.report.to_dict(), indent=2, default=float))
    return 0


def _pcm_chunks(args, chunk_samples: int = 3840):
    if args.raw:
        stream = sys.stdin.buffer
        while True:
            buf = stream.read(2 * chunk_samples)
            if not buf:
                return
            if len(buf) % 2:
                buf = buf[:-1]
            yield np.frombuffer(buf, "<i2").astype(np.float32) / 32768.0
    else:
        if not args.input:
            raise ConfigError("stream needs a WAV path or --raw")
        audio = read_wav(args.input)
        for i in range(0, len(audio), chunk_samples):
            yield audio[i : i + chunk_samples]


def cmd_stream(cfg, args) -> int:
    from .model import load_checkpoint

    if not args.checkpoint:
        raise ConfigError("stream needs --checkpoint PATH")
    model = load_checkpoint(args.checkpoint)
    words = model.extra.get("lexicon") or [str(c) for c in range(1, model.n_classes + 1)]
    runner = StreamingKws(model, decoder_config(cfg))
    out = open(args.out, "w") if args.out else sys.stdout
    seen = 0
    stream_id = args.input or "stdin"

    def emit(events):
        nonlocal seen
        for tel in runner.telemetry[seen:]:
            out.write(json.dumps({"type": "telemetry", **tel}) + "\n")
        seen = len(runner.telemetry)
        for ev in events:
            rec = {"type": "event", "stream": stream_id, "word": words[ev.class_id - 1], "class_id": ev.class_id, "begin_s": round(ev.b_hat, 4), "end_s": round(ev.e_hat, 4), "score": round(ev.score, 6)}
            out.write(json.dumps(rec) + "\n")
        out.flush()

    try:
        for chunk in _pcm_chunks(args):
            emit(runner.push_audio(chunk))
        emit(runner.finish())
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def cmd_gradcheck(cfg, args) -> int:
    from . import gradcheck

    tol = 1e-4
    ok = True
    for kind, err in gradcheck.run_suite(args.seeds).items():
        good = err < tol
        ok &= good
        print(f"{'PASS' if good else 'FAIL'}  {kind:<20} max rel err {err:.2e}")
    if not args.skip_model:
        err = max(gradcheck.check_model(s) for s in range(args.seeds))
        good = err < tol
        ok &= good
        print(f"{'PASS' if good else 'FAIL'}  {'model(H=8,N_z=1,C=2)':<20} max rel err {err:.2e}")
    return 0 if ok else 1


def cmd_bench_macs(cfg, args) -> int:
    ecfg = encoder_config(cfg)
    T = subsampled_length(WINDOW_FRAMES)
    print(f"encoder H={ecfg.hidden} N_z={ecfg.blocks} T_z={T}")
    for kind in ("ffn", "mhsa", "conv"):
        print(f"  {kind:<5} {module_macs(ecfg, kind, T):>12,d} MACs per module")
    print(f"{'gates':<8}{'analytic':>14}{'instrumented':>14}  match")
    ok = True
    for force in ("open", None, "closed"):
        analytic, counted = measure_macs(ecfg, force, seed=cfg["seed"])
        ok &= analytic == counted
        print(f"{force or 'learned':<8}{analytic:>14,d}{counted:>14,d}  {'yes' if analytic == counted else 'NO'}")
    return 0 if ok else 1


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "stream": cmd_stream,
    "gradcheck": cmd_gradcheck,
    "bench-macs": cmd_bench_macs,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (partial documents allowed)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config value, e.g. train.epochs=5")
    common.add_argument("--seed", type=int)
    common.add_argument("--checkpoint", help="model checkpoint (.npz)")
    common.add_argument("--out", help="output path")
    common.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="gatedkws", description="Gated conformer keyword spotting at toy scale.")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset to --out")
    p = sub.add_parser("train", parents=[common], help="train a model on --data, save to --out")
    p.add_argument("--data")
    p.add_argument("--history", help="line-delimited JSON history (default: <out>.history.jsonl)")
    p.add_argument("--resume", help="continue from a checkpoint written by train")
    p = sub.add_parser("eval", parents=[common], help="decode a split and print the metric table")
    p.add_argument("--data")
    p.add_argument("--split")
    p = sub.add_parser("stream", parents=[common], help="streaming inference over a WAV or raw PCM on stdin")
    p.add_argument("input", nargs="?")
    p.add_argument("--raw", action="store_true", help="read 16-bit little-endian mono PCM at 16 kHz from stdin")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op and the toy model")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--skip-model", action="store_true")
    sub.add_parser("bench-macs", parents=[common], help="analytic vs instrumented MAC counts")
    return ap


def run(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.dump_config:
            print(json.dumps(cfg, indent=2))
            return 0
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, DatasetError, UnsupportedFormatError, ContractError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # anything else is a runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
