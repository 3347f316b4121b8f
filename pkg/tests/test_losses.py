"""Tests for the training objectives."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semamba import losses
from semamba.autodiff import Tensor
from semamba.checks import losses_suite
from semamba.spectral import StftConfig, istft_op, stft_complex, stft_op

CFG = StftConfig(n_fft=64, hop=16, win_len=64)


def _spec(x, cfg=CFG):
    return stft_op(Tensor(x), cfg)


class TestMagMae:
    def test_equal_is_zero(self):
        a = np.random.default_rng(0).uniform(0, 2, (4, 5))
        assert losses.mag_mae(a, a).item() == 0.0

    def test_offset_one(self):
        a = np.random.default_rng(1).uniform(0, 2, (4, 5))
        assert losses.mag_mae(a + 1.0, a).item() == pytest.approx(1.0, rel=1e-15)

    def test_summation_oracle(self):
        rng = np.random.default_rng(2)
        a, b = rng.standard_normal((2, 6, 7))
        ref = sum(abs(float(u) - float(v)) for u, v in zip(a.ravel(), b.ravel())) / a.size
        assert losses.mag_mae(a, b).item() == pytest.approx(ref, rel=1e-13)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            losses.mag_mae(np.zeros(3), np.zeros(4))


class TestPhaseDistance:
    def test_equal_is_zero(self):
        p = np.random.default_rng(3).uniform(-3, 3, 10)
        assert losses.phase_distance(p, p).item() == 0.0

    def test_wraps_across_boundary(self):
        d = losses.phase_distance(np.array([np.pi - 0.1]), np.array([-np.pi + 0.1])).item()
        assert d == pytest.approx(0.2, abs=1e-12)

    def test_shift_enumeration_oracle(self):
        rng = np.random.default_rng(4)
        a = rng.uniform(-np.pi, np.pi, 50)
        b = rng.uniform(-np.pi, np.pi, 50)
        brute = np.min([np.abs(a - b + 2 * np.pi * k) for k in (-1, 0, 1)], axis=0).mean()
        assert losses.phase_distance(a, b).item() == pytest.approx(brute, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.floats(-np.pi, np.pi), st.floats(-np.pi, np.pi))
def test_phase_distance_bounded_and_symmetric(a, b):
    d = losses.phase_distance(np.array([a]), np.array([b])).item()
    assert 0.0 <= d <= np.pi + 1e-12
    assert d == pytest.approx(losses.phase_distance(np.array([b]), np.array([a])).item(), abs=1e-12)


class TestConsistency:
    def test_stft_output_is_consistent(self):
        x = np.random.default_rng(5).standard_normal(400)
        assert losses.consistency_loss(_spec(x), CFG, 400).item() < 1e-18

    def test_random_spectrum_is_inconsistent(self):
        rng = np.random.default_rng(6)
        S = rng.standard_normal((CFG.n_frames(400), CFG.n_bins, 2))
        assert losses.consistency_loss(S, CFG, 400).item() > 1e-3

    def test_projection_idempotent(self):
        rng = np.random.default_rng(7)
        S = Tensor(rng.standard_normal((CFG.n_frames(400), CFG.n_bins, 2)))
        projected = stft_op(istft_op(S, CFG, 400), CFG)
        assert losses.consistency_loss(projected, CFG, 400).item() < 1e-18

    def test_frame_count_mismatch(self):
        S = np.zeros((CFG.n_frames(400) + 3, CFG.n_bins, 2))
        with pytest.raises(ValueError):
            losses.consistency_loss(S, CFG, 400)


@settings(max_examples=20, deadline=None)
@given(st.integers(64, 500), st.integers(0, 2**32 - 1))
def test_consistency_zero_on_stft_outputs(length, seed):
    x = np.random.default_rng(seed).standard_normal(length)
    assert losses.consistency_loss(_spec(x), CFG, length).item() < 1e-18


class TestCompressed:
    def test_compressed_mag_oracle(self):
        X = stft_complex(np.random.default_rng(8).standard_normal(200), CFG)
        spec = np.stack([X.real, X.imag], -1)
        ref = (np.abs(X) ** 2 + losses.MAG_EPS) ** 0.15
        np.testing.assert_allclose(losses.compressed_mag(spec).data, ref, rtol=1e-12)

    def test_compressed_complex_keeps_phase(self):
        X = stft_complex(np.random.default_rng(9).standard_normal(200), CFG)
        spec = np.stack([X.real, X.imag], -1)
        cc = losses.compressed_complex(spec).data
        Z = cc[..., 0] + 1j * cc[..., 1]
        big = np.abs(X) > 1e-3
        np.testing.assert_allclose(Z[big] / np.abs(Z[big]), X[big] / np.abs(X[big]), atol=1e-12)
        np.testing.assert_allclose(np.abs(Z[big]), np.abs(X[big]) ** 0.3, rtol=1e-6)


class TestComposite:
    def _pair(self, seed, L=256):
        rng = np.random.default_rng(seed)
        target = rng.standard_normal(L)
        pred = target + 0.3 * rng.standard_normal(L)
        return pred, target

    def test_equal_is_zero(self):
        _, target = self._pair(10)
        w = losses.LossWeights(1, 1, 1, 1, 1)
        total, terms = losses.composite_loss(target, _spec(target), target, w, CFG)
        assert total.item() < 1e-18
        assert set(terms) == set(losses.TERMS)

    def test_time_only_impulse(self):
        _, target = self._pair(11)
        delta = 0.7
        pred = target.copy()
        pred[37] += delta
        w = losses.LossWeights(w_time=1.0, w_mag=0.0, w_complex=0.0, w_phase=0.0, w_consistency=0.0)
        total, _ = losses.composite_loss(pred, _spec(target), target, w, CFG)
        assert total.item() == pytest.approx(delta / len(target), rel=1e-12)

    def test_total_is_weighted_sum_of_terms(self):
        pred, target = self._pair(12)
        rng = np.random.default_rng(13)
        spec = _spec(pred).data + 0.05 * rng.standard_normal(_spec(pred).shape)
        w = losses.LossWeights(0.2, 0.9, 0.1, 0.3, 0.1)
        total, terms = losses.composite_loss(pred, spec, target, w, CFG)
        tgt = _spec(target)
        oracle = {
            "time": np.mean(np.abs(pred - target)),
            "mag": np.mean((losses.compressed_mag(spec).data - losses.compressed_mag(tgt).data) ** 2),
            "complex": np.mean((losses.compressed_complex(spec).data
                                - losses.compressed_complex(tgt).data) ** 2),
            "phase": losses.phase_distance(losses.spec_phase(spec), losses.spec_phase(tgt)).item(),
            "consistency": losses.consistency_loss(spec, CFG, len(target)).item(),
        }
        for name in losses.TERMS:
            assert terms[name] == pytest.approx(oracle[name], rel=1e-12)
        manual = sum(getattr(w, f"w_{n}") * oracle[n] for n in losses.TERMS)
        assert total.item() == pytest.approx(manual, rel=1e-12)

    def test_shape_mismatch(self):
        pred, target = self._pair(14)
        with pytest.raises(ValueError):
            losses.composite_loss(pred[:-1], _spec(target), target, losses.LossWeights(), CFG)


class TestWeights:
    def test_defaults_valid(self):
        w = losses.LossWeights()
        assert w.w_gan == 0.0

    def test_gan_term_not_implemented(self):
        with pytest.raises(NotImplementedError):
            losses.LossWeights(w_gan=0.05)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            losses.LossWeights(w_time=-1.0)

    def test_all_zero_rejected(self):
        with pytest.raises(ValueError):
            losses.LossWeights(0, 0, 0, 0, 0)

    def test_from_dict(self):
        assert losses.LossWeights.from_dict({"w_time": 1.0}).w_time == 1.0
        with pytest.raises(ValueError):
            losses.LossWeights.from_dict({"w_bogus": 1.0})


@pytest.mark.parametrize("name,report", losses_suite(0), ids=lambda v: v if isinstance(v, str) else "")
def test_loss_gradients(name, report):
    assert report.passed, f"{name}: {report}"
