import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adapted_moe.exceptions import DimensionError
from adapted_moe.numeric import l2_normalize
from adapted_moe.tta import CalibrationStats, calibrate, fit_calibration_stats, moment_match


def stats(center, std):
    return CalibrationStats(np.asarray(center, float), np.asarray(std, float), count=10)


class TestFit:
    def test_by_hand(self):
        st_ = fit_calibration_stats(np.array([[0.0, 0.0], [2.0, 0.0]]), np.array([0.1, 0.2]))
        np.testing.assert_array_equal(st_.std, [1.0, 0.0])
        assert st_.degenerate.tolist() == [False, True]
        np.testing.assert_array_equal(st_.center, [0.1, 0.2])
        assert st_.count == 2

    def test_identical_embeddings(self):
        st_ = fit_calibration_stats(np.ones((5, 3)), np.zeros(3))
        assert st_.degenerate.all()

    def test_order_invariant(self):
        E = np.random.default_rng(0).normal(size=(20, 4))
        a = fit_calibration_stats(E, np.zeros(4))
        b = fit_calibration_stats(E[::-1], np.zeros(4))
        np.testing.assert_allclose(a.std, b.std, atol=1e-15)

    def test_accepts_maps_of_rows(self):
        E = np.random.default_rng(1).normal(size=(3, 16, 4))
        st_ = fit_calibration_stats(E, np.zeros(4))
        np.testing.assert_allclose(st_.std, E.reshape(-1, 4).std(axis=0))

    def test_scalar_mode(self):
        E = np.random.default_rng(2).normal(size=(50, 3)) * [1.0, 2.0, 3.0]
        st_ = fit_calibration_stats(E, np.zeros(3), std_mode="scalar")
        assert np.all(st_.std == st_.std[0])
        with pytest.raises(ValueError):
            fit_calibration_stats(E, np.zeros(3), std_mode="bogus")

    def test_errors(self):
        with pytest.raises(ValueError):
            fit_calibration_stats(np.ones((1, 3)), np.zeros(3))
        with pytest.raises(DimensionError):
            fit_calibration_stats(np.ones((4, 3)), np.zeros(2))


class TestCalibrate:
    def test_by_hand(self):
        E = np.array([[2.0, 1.0], [0.0, 3.0]])
        s = stats([0.0, 0.0], [2.0, 2.0])
        np.testing.assert_allclose(moment_match(E, s), [[2.0, -2.0], [-2.0, 2.0]])
        r = np.sqrt(0.5)
        np.testing.assert_allclose(calibrate(E, s), [[r, -r], [-r, r]], atol=1e-12)

    def test_fixed_point(self):
        rng = np.random.default_rng(3)
        E = rng.normal(size=(30, 4))
        s = stats(E.mean(axis=0), E.std(axis=0))
        np.testing.assert_allclose(moment_match(E, s), E, atol=1e-6)

    def test_identical_rows(self):
        c = np.array([0.3, -0.4, 1.2])
        out = calibrate(np.tile([5.0, 6.0, 7.0], (4, 1)), stats(c, [1.0, 1.0, 1.0]))
        np.testing.assert_allclose(out, np.tile(l2_normalize(c), (4, 1)))

    def test_degenerate_training_dim_passes_through_center(self):
        E = np.random.default_rng(4).normal(size=(10, 2))
        out = moment_match(E, stats([0.5, 0.25], [1.0, 0.0]))
        np.testing.assert_array_equal(out[:, 1], 0.25)

    def test_zero_center_on_dead_dims_leaves_zero_rows(self):
        E = np.ones((4, 2))
        out = calibrate(E, stats([0.0, 0.0], [1.0, 1.0]))
        np.testing.assert_array_equal(out, 0.0)

    def test_without_renormalization(self):
        E = np.array([[2.0, 1.0], [0.0, 3.0]])
        s = stats([1.0, 1.0], [2.0, 2.0])
        np.testing.assert_allclose(calibrate(E, s, renormalize=False), moment_match(E, s))

    def test_idempotent_on_calibrated_normalized_data(self):
        rng = np.random.default_rng(5)
        s = stats(l2_normalize(rng.normal(size=6)), np.full(6, 0.1))
        once = calibrate(rng.normal(size=(40, 6)), s)
        target = stats(once.mean(axis=0), once.std(axis=0))
        np.testing.assert_allclose(calibrate(once, target), once, atol=1e-5)

    def test_errors(self):
        with pytest.raises(ValueError):
            calibrate(np.ones((1, 2)), stats([0, 0], [1, 1]))
        with pytest.raises(DimensionError):
            calibrate(np.ones((3, 3)), stats([0, 0], [1, 1]))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(2, 8), st.integers(4, 40))
    def test_affine_invariance(self, seed, dim, rows):
        rng = np.random.default_rng(seed)
        E = rng.normal(size=(rows, dim))
        s = stats(rng.normal(size=dim), rng.uniform(0.05, 2.0, size=dim))
        a = rng.uniform(0.1, 10.0, size=dim)
        b = rng.normal(scale=5.0, size=dim)
        np.testing.assert_allclose(calibrate(a * E + b, s), calibrate(E, s), atol=1e-5)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(2, 8), st.integers(4, 40))
    def test_moments_match(self, seed, dim, rows):
        rng = np.random.default_rng(seed)
        E = rng.normal(size=(rows, dim)) * rng.uniform(0.1, 3, size=dim) + rng.normal(size=dim)
        s = stats(rng.normal(size=dim), rng.uniform(0.05, 2.0, size=dim))
        out = moment_match(E, s)
        np.testing.assert_allclose(out.mean(axis=0), s.center, atol=1e-5)
        np.testing.assert_allclose(out.std(axis=0), s.std, atol=1e-5)
