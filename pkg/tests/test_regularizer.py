import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from irlm import tensor as T
from irlm.gradcheck import numerical_grad, relative_error
from irlm.model import HiddenStates, forward
from irlm.regularizer import (
    RegularizerConfig, dpp, ecp, fill_back, hidden_to_distribution, mse_distance, regularized_loss,
)
from irlm.tensor import ShapeError, Tensor
from irlm.text import CLS, MASK, SEP, pad_batch


def _hs(values, provenance, mask=None, grad=False):
    values = np.asarray(values, dtype=np.float64)
    mask = np.ones(values.shape[:2], dtype=np.int64) if mask is None else np.asarray(mask)
    return HiddenStates(Tensor(values, requires_grad=grad), mask, provenance)


def _kl_rows(a, b):
    """Position-wise KL(softmax(a) || softmax(b)) by plain summation."""
    out = []
    for ra, rb in zip(a, b):
        pa = [math.exp(x) for x in ra]
        pb = [math.exp(x) for x in rb]
        pa = [x / sum(pa) for x in pa]
        pb = [x / sum(pb) for x in pb]
        out.append(sum(x * math.log(x / y) for x, y in zip(pa, pb)))
    return out


class TestFillBack:
    def test_substitution(self):
        the, cat, sat = 10, 11, 12
        out = fill_back([CLS, the, MASK, sat, SEP], [2], [cat])
        assert out.ids == [CLS, the, cat, sat, SEP]
        assert out.masked_positions == [2]

    def test_empty_positions_identity(self):
        seq = [CLS, 10, 11, SEP]
        assert fill_back(seq, [], []).ids == seq

    def test_perfect_predictions_restore_original(self):
        original = [CLS, 10, 11, 12, 13, SEP]
        corrupted = [CLS, MASK, 11, 40, 13, SEP]
        assert fill_back(corrupted, [1, 3], [10, 12]).ids == original

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            fill_back([CLS, MASK, SEP], [1], [])

    def test_mask_prediction_rejected(self):
        with pytest.raises(ValueError, match="mask"):
            fill_back([CLS, MASK, SEP], [1], [MASK])


class TestDistribution:
    def test_constant_row_uniform(self):
        d = hidden_to_distribution(_hs(np.full((1, 2, 8), 0.7), "original")).data
        np.testing.assert_allclose(d, 1 / 8, atol=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (2, 3, 5), elements=st.floats(-30, 30)))
    def test_row_stochastic(self, values):
        d = hidden_to_distribution(_hs(values, "corrupted")).data
        assert np.all(d >= 0)
        np.testing.assert_allclose(d.sum(axis=-1), 1.0, atol=1e-12)


class TestECP:
    def test_identical_is_zero(self):
        v = np.random.default_rng(0).normal(size=(2, 4, 6))
        assert abs(ecp(_hs(v, "corrupted"), _hs(v, "original")).item()) <= 1e-10

    def test_two_position_oracle(self):
        h = [[[1.0, 0.0, -1.0], [0.5, 0.5, 2.0]]]
        h_hat = [[[0.0, 0.0, 0.0], [2.0, -1.0, 0.0]]]
        expected = sum(_kl_rows(h[0], h_hat[0])) / 2
        assert ecp(_hs(h, "corrupted"), _hs(h_hat, "original")).item() == pytest.approx(expected, abs=1e-14)

    def test_padding_excluded(self):
        h = [[[1.0, 0.0, -1.0], [9.0, -9.0, 0.0]]]
        h_hat = [[[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]]
        mask = [[1, 0]]
        expected = _kl_rows(h[0][:1], h_hat[0][:1])[0]
        assert ecp(_hs(h, "corrupted", mask), _hs(h_hat, "original", mask)).item() == pytest.approx(expected, abs=1e-14)

    def test_mean_over_sequences_then_batch(self):
        rng = np.random.default_rng(1)
        h, h_hat = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
        mask = np.array([[1, 1, 1], [1, 0, 0]])
        per_seq = [np.mean(_kl_rows(h[0], h_hat[0])), _kl_rows(h[1][:1], h_hat[1][:1])[0]]
        out = ecp(_hs(h, "corrupted", mask), _hs(h_hat, "original", mask)).item()
        assert out == pytest.approx(np.mean(per_seq), abs=1e-14)

    def test_batch_permutation_invariance(self):
        rng = np.random.default_rng(2)
        h, h_hat = rng.normal(size=(4, 3, 5)), rng.normal(size=(4, 3, 5))
        mask = np.array([[1, 1, 1], [1, 1, 0], [1, 0, 0], [1, 1, 1]])
        perm = [2, 0, 3, 1]
        a = ecp(_hs(h, "corrupted", mask), _hs(h_hat, "original", mask)).item()
        b = ecp(_hs(h[perm], "corrupted", mask[perm]), _hs(h_hat[perm], "original", mask[perm])).item()
        assert a == pytest.approx(b, abs=1e-14)

    def test_provenance_checked(self):
        v = np.zeros((1, 2, 3))
        with pytest.raises(ValueError, match="provenance|expects"):
            ecp(_hs(v, "filled"), _hs(v, "original"))

    def test_shape_checked(self):
        with pytest.raises(ShapeError):
            ecp(_hs(np.zeros((1, 2, 3)), "corrupted"), _hs(np.zeros((1, 3, 3)), "original"))

    def test_swap_kl_direction(self):
        h = [[[1.0, 0.0, -1.0]]]
        h_hat = [[[0.0, 2.0, 0.0]]]
        out = ecp(_hs(h, "corrupted"), _hs(h_hat, "original"), config=RegularizerConfig(swap_kl=True)).item()
        assert out == pytest.approx(_kl_rows(h_hat[0], h[0])[0], abs=1e-14)

    def test_gradient_stays_off_target(self):
        rng = np.random.default_rng(3)
        h = _hs(rng.normal(size=(2, 3, 4)), "corrupted", grad=True)
        h_hat = _hs(rng.normal(size=(2, 3, 4)), "original", grad=True)
        T.backward(ecp(h, h_hat))
        assert h.values.grad is not None and np.abs(h.values.grad).sum() > 0
        assert h_hat.values.grad is None

    def test_gradient_reaches_target_when_not_detached(self):
        rng = np.random.default_rng(3)
        h = _hs(rng.normal(size=(2, 3, 4)), "corrupted", grad=True)
        h_hat = _hs(rng.normal(size=(2, 3, 4)), "original", grad=True)
        T.backward(ecp(h, h_hat, config=RegularizerConfig(detach_original=False)))
        assert np.abs(h_hat.values.grad).sum() > 0

    @pytest.mark.parametrize("distance", ["kl", "mse"])
    def test_gradient_matches_finite_differences(self, distance):
        rng = np.random.default_rng(4)
        cfg = RegularizerConfig(distance=distance, detach_original=False)
        h = _hs(rng.normal(size=(2, 3, 4)), "corrupted", [[1, 1, 1], [1, 1, 0]], grad=True)
        h_hat = _hs(rng.normal(size=(2, 3, 4)), "original", [[1, 1, 1], [1, 1, 0]], grad=True)
        T.backward(ecp(h, h_hat, config=cfg))
        for t in (h.values, h_hat.values):
            num = numerical_grad(lambda: ecp(h, h_hat, config=cfg).item(), t)
            assert relative_error(t.grad, num).max() < 1e-4


class TestDPP:
    def test_perfect_predictions_give_zero(self, tiny_model):
        original = [CLS, 10, 11, 12, 13, SEP]
        corrupted = [CLS, MASK, 11, 12, 30, SEP]
        filled = fill_back(corrupted, [1, 4], [10, 13]).ids
        with T.no_grad():
            b1, b2 = pad_batch([original]), pad_batch([filled])
            h_hat = forward(tiny_model, b1.ids, b1.attention_mask, provenance="original")
            h_tilde = forward(tiny_model, b2.ids, b2.attention_mask, provenance="filled")
            assert abs(dpp(h_tilde, h_hat).item()) <= 1e-10

    def test_provenance_checked(self):
        v = np.zeros((1, 2, 3))
        with pytest.raises(ValueError):
            dpp(_hs(v, "corrupted"), _hs(v, "original"))

    def test_detach_filled(self):
        rng = np.random.default_rng(5)
        h = _hs(rng.normal(size=(1, 3, 4)), "filled", grad=True)
        h_hat = _hs(rng.normal(size=(1, 3, 4)), "original")
        out = dpp(h, h_hat, config=RegularizerConfig(detach_filled=True))
        assert not out.requires_grad


class TestMSE:
    def test_identical(self):
        p = T.softmax(Tensor(np.random.default_rng(0).normal(size=(1, 3, 4))))
        assert mse_distance(p, p, np.ones((1, 3))).item() == 0.0

    def test_swapped_one_hots(self):
        a = Tensor([[[0.0, 1.0], [1.0, 0.0]]])
        b = Tensor([[[1.0, 0.0], [0.0, 1.0]]])
        assert mse_distance(a, b, np.ones((1, 2))).item() == pytest.approx(1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mse_distance(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 2, 3))), np.ones((1, 2)))


class TestRegularizedLoss:
    def test_unit_weights(self):
        assert regularized_loss(1.0, 0.2, 0.3).l_total == pytest.approx(1.5)

    def test_no_ecp(self):
        bd = regularized_loss(1.0, 0.2, 0.3, RegularizerConfig(weight_ecp=0.0))
        assert bd.l_total == pytest.approx(1.3)
        assert bd.l_ecp == 0.2

    def test_baseline(self):
        bd = regularized_loss(1.0, 0.2, 0.3, RegularizerConfig(weight_ecp=0.0, weight_dpp=0.0))
        assert bd.l_total == 1.0

    @pytest.mark.parametrize("bad", ["l_dae", "l_ecp", "l_dpp"])
    def test_non_finite_named(self, bad):
        terms = {"l_dae": 1.0, "l_ecp": 0.2, "l_dpp": 0.3, bad: float("nan")}
        with pytest.raises(FloatingPointError, match=bad):
            regularized_loss(**terms)

    def test_tensor_terms_keep_graph(self):
        x = Tensor(np.array(2.0), requires_grad=True)
        bd = regularized_loss(x * 1.0, x * x, Tensor(0.5), RegularizerConfig(weight_ecp=0.5))
        T.backward(bd.loss)
        assert x.grad == pytest.approx(1.0 + 0.5 * 2 * 2.0)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            RegularizerConfig(distance="cosine")
        with pytest.raises(ValueError):
            RegularizerConfig(weight_ecp=-1.0)
