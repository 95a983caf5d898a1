"""End-to-end toy run: synthetic commands over babble, plain model, then gates.

The gated model starts from the plain model's weights. Its gate layers are
trained first with the backbone frozen (lambda = 1), then every weight gets a
short low-rate pass so the backbone adapts to the modules it now skips.
"""

from __future__ import annotations

import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from gatedkws.data import SynthConfig, generate_synthetic, load_dataset
from gatedkws.encoder import EncoderConfig
from gatedkws.model import KwsModel, transfer_weights
from gatedkws.trainer import TrainConfig, evaluate, train

SEEDS = (0, 1, 2)
DATA_SEED = 0
DEV_UTTERANCES = 200  # about 180 keywords, so one miss moves F1 by well under the 0.05 margin
ENCODER = dict(hidden=32, blocks=2, heads=2, conv_kernel=7, subsample_channels=8, dropout=0.0)
PLAIN_TRAIN = dict(epochs=30, lr_max=1e-3, validate_every=30)
GATE_TRAIN = dict(epochs=16, lr_max=1e-2, lam=1.0, gate_pretrain_epochs=0, finetune_gates=True, validate_every=16)
RECOVER_TRAIN = dict(epochs=8, lr_max=3e-4, lam=1.0, gate_pretrain_epochs=0, validate_every=8)


@dataclass
class SeedResult:
    seed: int
    plain_f1: float
    gated_f1: float
    skip: dict  # tag -> gateable skip fraction of the gated model on dev
    plain_loss: tuple  # (first epoch, last epoch)
    gate_f_open: float
    seconds: float
    extra: dict = field(default_factory=dict)

    @property
    def gap(self) -> float:
        return self.skip.get("noise", 0.0) - self.skip.get("speech", 0.0)


def make_dataset(root):
    root = Path(root)
    if (root / "synth_config.json").exists():
        return load_dataset(root)
    return generate_synthetic(SynthConfig(seed=DATA_SEED, n_dev=DEV_UTTERANCES, n_test=0), root)


def run_seed(ds, seed: int) -> SeedResult:
    t0 = time.time()
    plain = KwsModel(EncoderConfig(gating=False, **ENCODER), ds.n_classes, seed=seed)
    hist = train(ds, plain, TrainConfig(seed=seed, **PLAIN_TRAIN))
    plain_eval = evaluate(plain, ds["dev"])

    gated = KwsModel(EncoderConfig(gating=True, **ENCODER), ds.n_classes, seed=seed)
    transfer_weights(gated, plain)
    train(ds, gated, TrainConfig(seed=seed, **GATE_TRAIN))
    ghist = train(ds, gated, TrainConfig(seed=seed, **RECOVER_TRAIN))
    gated_eval = evaluate(gated, ds["dev"])
    return SeedResult(
        seed,
        plain_eval.report.f1,
        gated_eval.report.f1,
        dict(gated_eval.skip),
        (hist[0]["loss"], hist[-1]["loss"]),
        ghist[-1]["f_open"],
        time.time() - t0,
        {"plain": plain_eval.report.table_row(), "gated": gated_eval.report.table_row()},
    )


if __name__ == "__main__":
    ds = make_dataset(sys.argv[1] if len(sys.argv) > 1 else "/tmp/toy_data")
    for s in SEEDS:
        r = run_seed(ds, s)
        print(json.dumps({**r.__dict__, "gap": r.gap}), flush=True)
