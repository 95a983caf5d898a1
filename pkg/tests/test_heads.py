import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gatedkws import numerics as nx
from gatedkws.heads import Heads, classify, detect, localize, maxpool_select
from gatedkws.numerics import ContractError, Tensor


def _logit(p):
    return math.log(p / (1 - p))


def zero_heads(hidden=4, C=2, mask_mode="zero"):
    h = Heads(hidden, C, np.random.default_rng(0), mask_mode)
    for lin in (h.det, h.cls, h.loc):
        lin.weight.data[:] = 0.0
        lin.bias.data[:] = 0.0
    return h


Z = Tensor(np.random.default_rng(1).standard_normal((1, 29, 4)).astype(np.float64))


class TestDetect:
    def test_zero_weights_give_one_half(self):
        npt.assert_array_equal(detect(Z, zero_heads()).data, 0.5)

    def test_negative_bias(self):
        h = zero_heads()
        h.det.bias.data[:] = -10.0
        npt.assert_allclose(detect(Z, h).data, 4.54e-5, rtol=1e-3)


class TestClassify:
    def test_all_detected_is_plain_softmax(self):
        h = zero_heads()
        h.det.bias.data[:] = 5.0
        h.cls.bias.data[:] = (3.0, 1.0, 2.0)
        out = classify(Z, detect(Z, h), h).data
        npt.assert_allclose(out[0, 0], nx.softmax(Tensor(np.array([3.0, 1.0, 2.0]))).data, rtol=1e-6)

    def test_nothing_detected_with_zero_logits_is_uniform(self):
        h = zero_heads()
        h.det.bias.data[:] = -5.0
        npt.assert_allclose(classify(Z, detect(Z, h), h).data, 1 / 3, rtol=1e-6)

    def test_masked_logit_competes_at_zero(self):
        h = zero_heads()
        h.det.bias.data[:] = (_logit(0.4), _logit(0.9))
        h.cls.bias.data[:] = (3.0, 1.0, 2.0)
        out = classify(Z, detect(Z, h), h).data[0, 0]
        npt.assert_allclose(out, nx.softmax(Tensor(np.array([0.0, 1.0, 2.0]))).data, rtol=1e-6)

    def test_neg_inf_mode_removes_masked_class(self):
        h = zero_heads(mask_mode="neg_inf")
        h.det.bias.data[:] = (_logit(0.4), _logit(0.9))
        h.cls.bias.data[:] = (3.0, 1.0, 2.0)
        out = classify(Z, detect(Z, h), h).data[0, 0]
        npt.assert_allclose(out[0], 0.0, atol=1e-12)
        npt.assert_allclose(out[1:], nx.softmax(Tensor(np.array([1.0, 2.0]))).data, rtol=1e-6)

    def test_bad_mask_mode(self):
        with pytest.raises(ValueError):
            Heads(4, 2, np.random.default_rng(0), "drop")


class TestLocalize:
    def test_zero_layer_gives_zeros(self):
        w, o = localize(Z, zero_heads())
        assert w.shape == o.shape == (1, 29, 2)
        npt.assert_array_equal(w.data, 0.0)
        npt.assert_array_equal(o.data, 0.0)

    def test_bias_passthrough(self):
        h = zero_heads()
        h.loc.bias.data[:] = (0.5, 0.0, 0.0, -1.0)
        w, o = localize(Z, h)
        npt.assert_array_equal(w.data[..., 0], 0.5)
        npt.assert_array_equal(o.data[..., 1], -1.0)


class TestMaxpoolSelect:
    def _select(self, y_class):
        y = Tensor(y_class)
        C = y_class.shape[2] - 1
        aux = Tensor(np.random.default_rng(2).standard_normal((1, 29, C)))
        return maxpool_select(y, aux, aux, aux), aux

    def test_six_steps(self):
        sel, _ = self._select(np.full((1, 29, 3), 1 / 3))
        assert sel.steps == 6
        assert sel.y_class.shape == (1, 6, 3)

    def test_constant_input_picks_window_start(self):
        sel, _ = self._select(np.full((1, 29, 3), 1 / 3))
        npt.assert_array_equal(sel.selected_t[0], np.repeat(np.arange(6)[:, None], 2, axis=1))
        npt.assert_array_equal(sel.y_class.data, 1 / 3)

    def test_increasing_scores_pick_last_index(self):
        y = (np.arange(29) / 29.0)[None, :, None].repeat(2, axis=2)
        sel, _ = self._select(y)
        npt.assert_array_equal(sel.selected_t[0, :, 0], np.arange(6) + 23)

    def test_too_short(self):
        with pytest.raises(ContractError):
            self._select(np.ones((1, 20, 3)))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_gather_consistency(self, seed):
        y = np.random.default_rng(seed).random((1, 29, 4))
        sel, aux = self._select(y)
        for s in range(6):
            for c in range(3):
                t = sel.selected_t[0, s, c]
                assert sel.y_class.data[0, s, c] == y[0, t, c]
                assert sel.y_det.data[0, s, c] == aux.data[0, t, c]
                assert t == s + np.argmax(y[0, s : s + 24, c])
            assert sel.y_class.data[0, s, 3] == y[0, s : s + 24, 3].max()
