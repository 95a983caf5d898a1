import math

import numpy as np
import numpy.testing as npt
import pytest

from gatedkws import numerics as nx
from gatedkws.encoder import (
    INFER,
    MODULE_KINDS,
    TRAIN,
    ConformerBlock,
    Encoder,
    EncoderConfig,
    MacLedger,
    NoDataError,
    gate_forward,
    mac_report,
    measure_macs,
    subsampled_length,
)
from gatedkws.layers import Linear
from gatedkws.numerics import ContractError, Tensor

SMALL = dict(hidden=8, blocks=1, heads=2, conv_kernel=3, subsample_channels=2, dropout=0.0)


def set_gates(block: ConformerBlock, open_mask):
    for gate, is_open in zip(block.gates, open_mask):
        gate.weight.data[:] = 0.0
        gate.bias.data[:] = (10.0, -10.0) if is_open else (-10.0, 10.0)


class TestSubsampling:
    @pytest.mark.parametrize("t_in, t_out", [(120, 29), (7, 1), (118, 28)])
    def test_length(self, t_in, t_out):
        assert subsampled_length(t_in) == t_out

    def test_too_short(self):
        with pytest.raises(ContractError):
            subsampled_length(6)

    def test_encoder_output_shape(self):
        enc = Encoder(EncoderConfig(**SMALL), np.random.default_rng(0))
        res = enc(np.zeros((2, 120, 40), np.float32))
        assert res.z.shape == (2, 29, 8)
        assert res.gates.shape == (2, 4)


class TestGateForward:
    def _gate(self, bias):
        g = Linear(4, 2, np.random.default_rng(0))
        g.weight.data[:] = 0.0
        g.bias.data[:] = bias
        return g

    def test_symmetric_gate_is_closed_at_inference(self):
        dec = gate_forward(Tensor(np.ones((1, 3, 4))), self._gate((0.0, 0.0)), INFER)
        npt.assert_allclose(dec.p_keep, 0.5)
        assert dec.g[0] == 0

    def test_large_keep_bias_opens(self):
        dec = gate_forward(Tensor(np.ones((1, 3, 4))), self._gate((10.0, 0.0)), INFER)
        npt.assert_allclose(dec.p_keep, math.exp(10) / (math.exp(10) + 1), rtol=1e-6)
        assert dec.g[0] == 1

    @pytest.mark.parametrize("p", [0.1, 0.5, 0.9])
    def test_gumbel_keep_rate(self, p):
        gate = self._gate((math.log(p), math.log(1 - p)))
        dec = gate_forward(Tensor(np.zeros((10_000, 1, 4))), gate, TRAIN, rng=np.random.default_rng(7))
        assert abs(dec.g.mean() - p) <= 0.02

    def test_training_gate_is_hard_with_gradient(self):
        gate = self._gate((0.3, -0.2))
        gate.bias.requires_grad = True
        with nx.Tape() as tape:
            dec = gate_forward(Tensor(np.ones((5, 2, 4))), gate, TRAIN, rng=np.random.default_rng(0))
            loss = nx.sum(dec.g_tensor)
        assert set(np.unique(dec.g_tensor.data)) <= {0.0, 1.0}
        tape.backward(loss)
        assert np.abs(gate.bias.grad).sum() > 0


class TestBlockSemantics:
    def setup_method(self):
        self.cfg = EncoderConfig(**SMALL)
        self.x = Tensor(np.random.default_rng(3).standard_normal((2, 9, 8)).astype(np.float32))

    def test_all_closed_is_layernorm_only(self):
        blk = ConformerBlock(self.cfg, np.random.default_rng(0))
        out, _ = blk(self.x, INFER, force="closed")
        npt.assert_array_equal(out.data, blk.norm(self.x).data)

    def test_open_gates_match_plain_block(self):
        plain = ConformerBlock(EncoderConfig(**{**SMALL, "gating": False}), np.random.default_rng(0))
        gated = ConformerBlock(self.cfg, np.random.default_rng(0), gate_rng=np.random.default_rng(1))
        set_gates(gated, [1, 1, 1, 1])
        a, _ = plain(self.x, INFER)
        b, _ = gated(self.x, INFER)
        npt.assert_array_equal(a.data, b.data)

    @pytest.mark.parametrize("skipped", range(4))
    def test_closed_module_equals_deletion(self, skipped):
        blk = ConformerBlock(self.cfg, np.random.default_rng(0), gate_rng=np.random.default_rng(1))
        set_gates(blk, [m != skipped for m in range(4)])
        out, _ = blk(self.x, INFER)
        h = self.x
        for m, module in enumerate(blk.modules):
            if m == skipped:
                continue
            y = module(h, False)
            h = nx.add(h, nx.scale(y, 0.5) if MODULE_KINDS[m] == "ffn" else y)
        npt.assert_array_equal(out.data, blk.norm(h).data)

    def test_mixed_batch_rows_are_independent(self):
        blk = ConformerBlock(self.cfg, np.random.default_rng(0), gate_rng=np.random.default_rng(1))
        both, dec = blk(self.x, INFER)
        for b in range(2):
            one, _ = blk(Tensor(self.x.data[b : b + 1]), INFER)
            npt.assert_allclose(both.data[b], one.data[0], rtol=1e-5, atol=1e-6)


class TestEncoderGating:
    def test_forced_open_bit_identical_to_plain(self):
        x = np.random.default_rng(0).standard_normal((2, 120, 40)).astype(np.float32)
        plain = Encoder(EncoderConfig(**{**SMALL, "gating": False}), np.random.default_rng(5))
        gated = Encoder(EncoderConfig(**SMALL), np.random.default_rng(5), np.random.default_rng(6))
        npt.assert_array_equal(plain(x).z.data, gated(x, force="open").z.data)
        assert float(gated(x, force="open").f_open.data) == 1.0

    def test_forced_closed_executes_nothing(self):
        enc = Encoder(EncoderConfig(**SMALL), np.random.default_rng(5))
        res = enc(np.zeros((1, 120, 40), np.float32), force="closed")
        assert float(res.f_open.data) == 0.0
        assert enc.ledger.executed_macs == 0
        assert mac_report(enc.ledger)["skip_fraction_gateable"] == 1.0

    def test_f_open_counts_open_gates(self):
        enc = Encoder(EncoderConfig(**{**SMALL, "blocks": 2}), np.random.default_rng(5))
        set_gates(enc.blocks[0], [1, 1, 1, 0])
        set_gates(enc.blocks[1], [1, 0, 1, 0])
        res = enc(np.zeros((1, 120, 40), np.float32))
        assert float(res.f_open.data) == 0.625

    def test_training_f_open_is_differentiable(self):
        enc = Encoder(EncoderConfig(**SMALL), np.random.default_rng(5))
        for t in enc.parameters():
            t.requires_grad = True
        with nx.Tape() as tape:
            res = enc(np.zeros((2, 120, 40), np.float32), TRAIN, rng=np.random.default_rng(0))
        tape.backward(res.f_open)
        assert any(np.abs(t.grad).sum() > 0 for t in enc.gate_parameters() if t.grad is not None)


class TestMacLedger:
    def test_plain_encoder_skips_nothing(self):
        enc = Encoder(EncoderConfig(**{**SMALL, "gating": False}), np.random.default_rng(5))
        enc(np.zeros((1, 120, 40), np.float32))
        assert mac_report(enc.ledger)["skip_fraction_gateable"] == 0.0

    def test_empty_ledger_raises(self):
        with pytest.raises(NoDataError):
            mac_report(MacLedger())

    def test_tags_split_counts(self):
        led = MacLedger()
        led.add(0, 100, 10, "noise")
        led.add(100, 100, 10, "speech")
        assert mac_report(led, "noise")["skip_fraction_gateable"] == 1.0
        assert mac_report(led, "speech")["skip_fraction_gateable"] == 0.0
        assert mac_report(led)["skip_fraction_gateable"] == 0.5
        npt.assert_allclose(mac_report(led)["skip_fraction_whole_encoder"], 100 / 220)

    @pytest.mark.parametrize("force", ["open", None, "closed"])
    def test_ledger_matches_instrumented_counter(self, force):
        ledger, counted = measure_macs(EncoderConfig(**SMALL), force=force)
        assert ledger == counted

    def test_frozen_counts(self):
        # by hand for H=8, T_z=29, 2 subsampling channels:
        # gateable 2*15080 + 21112 + 6728 = 58000; subsampling 20178 + 9396 + 4176 = 33750; block norm 232
        assert measure_macs(EncoderConfig(**SMALL), force="open") == (91982, 91982)
        assert measure_macs(EncoderConfig(**SMALL), force="closed") == (33982, 33982)

    def test_live_gates_add_their_own_cost(self):
        cfg = EncoderConfig(**SMALL)
        enc = Encoder(cfg, np.random.default_rng(0))
        set_gates(enc.blocks[0], [1, 1, 1, 1])
        c = nx.mac_counter()
        c.reset()
        enc(np.zeros((1, 120, 40), np.float32))
        assert c.count == enc.ledger.executed_macs + enc.ledger.ungated_total_macs == 91982 + 4 * 2 * 8
