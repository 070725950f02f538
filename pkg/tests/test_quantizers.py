"""Weight quantizer and calibration tests.

Oracles used here:
- a scalar threshold-based reference quantizer, written independently of the
  vectorized round/clip formula;
- explicit nearest-rank quantile indexing;
- analytic quantiles of the uniform, Gaussian and Laplace laws (frozen
  constants) confirmed by Monte-Carlo sampling.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nqe.quantizers import (
    QuantileSet,
    QuantizerSpec,
    compute_quantiles,
    estimate_delta,
    heaviside,
    linear_symmetric_quantize,
    mean_abs_norm_factor,
    sign_binarize,
    ste_backward,
)


def reference_quantize_scalar(x: float, delta: float, n: int) -> float:
    """Threshold-walk oracle: decide the level by comparing against the
    explicit decision boundaries instead of rounding."""
    half = (n - 1) // 2
    # boundaries between level k-1 and k sit at (2k-1)*delta/(n-2)
    mag = abs(x)
    level = 0
    for k in range(1, half + 1):
        if mag >= (2 * k - 1) * delta / (n - 2):
            level = k
    return math.copysign(level * 2.0 / (n - 1), x) if level else 0.0


def reference_nearest_rank(sorted_w, k, n):
    count = len(sorted_w)
    rank = math.ceil(k * count / n)
    return sorted_w[rank - 1]


class TestLinearSymmetricQuantize:
    def test_ternary_thresholds(self):
        spec = QuantizerSpec(3, 0.5, 1.0)
        assert linear_symmetric_quantize(np.array(0.6), spec) == 1.0
        assert linear_symmetric_quantize(np.array(0.3), spec) == 0.0
        assert linear_symmetric_quantize(np.array(-0.75), spec) == -1.0
        # threshold itself belongs to the outer level (half away from zero)
        assert linear_symmetric_quantize(np.array(0.5), spec) == 1.0
        assert linear_symmetric_quantize(np.array(-0.5), spec) == -1.0

    def test_quinary_thresholds(self):
        spec = QuantizerSpec(5, 0.6, 1.0)
        assert linear_symmetric_quantize(np.array(0.25), spec) == 0.5
        assert linear_symmetric_quantize(np.array(0.9), spec) == 1.0
        assert linear_symmetric_quantize(np.array(-0.1), spec) == 0.0
        assert linear_symmetric_quantize(np.array(0.2), spec) == 0.5  # = delta/3
        assert linear_symmetric_quantize(np.array(0.6), spec) == 1.0  # = delta

    def test_quinary_level_set(self):
        spec = QuantizerSpec(5, 0.37, 1.0)
        rng = np.random.default_rng(0)
        q = linear_symmetric_quantize(rng.normal(size=4096), spec)
        assert set(np.unique(q)) <= {-1.0, -0.5, 0.0, 0.5, 1.0}
        assert np.array_equal(spec.level_values(), [-1.0, -0.5, 0.0, 0.5, 1.0])

    @pytest.mark.parametrize("n", [3, 5])
    def test_matches_threshold_oracle(self, n):
        rng = np.random.default_rng(7)
        x = rng.uniform(-2, 2, size=500)
        for delta in (0.2, 0.5, 1.1):
            spec = QuantizerSpec(n, delta, 1.0)
            got = linear_symmetric_quantize(x, spec)
            want = [reference_quantize_scalar(v, delta, n) for v in x]
            np.testing.assert_array_equal(got, want)

    def test_rejects_non_finite(self):
        spec = QuantizerSpec(3, 0.5, 1.0)
        bad = np.array([[0.1, 0.2], [np.nan, 0.3]])
        with pytest.raises(ValueError, match=r"index \(1, 0\)"):
            linear_symmetric_quantize(bad, spec)

    @given(
        st.lists(st.floats(-8, 8), min_size=1, max_size=64),
        st.floats(0.05, 4.0),
        st.sampled_from([3, 5]),
    )
    def test_odd_symmetry(self, xs, delta, n):
        spec = QuantizerSpec(n, delta, 1.0)
        x = np.array(xs)
        np.testing.assert_array_equal(
            linear_symmetric_quantize(-x, spec), -linear_symmetric_quantize(x, spec)
        )

    @given(
        st.lists(st.floats(-8, 8), min_size=2, max_size=64),
        st.floats(0.05, 4.0),
        st.sampled_from([3, 5]),
    )
    def test_monotone(self, xs, delta, n):
        spec = QuantizerSpec(n, delta, 1.0)
        x = np.sort(np.array(xs))
        q = linear_symmetric_quantize(x, spec)
        assert np.all(np.diff(q) >= 0)

    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=64), st.floats(0.01, 10))
    def test_level_closure(self, xs, delta):
        spec = QuantizerSpec(5, delta, 1.0)
        q = linear_symmetric_quantize(np.array(xs), spec)
        assert set(np.unique(q)) <= set(spec.level_values().tolist())


class TestQuantiles:
    def test_five_point_example(self):
        qs = compute_quantiles(np.array([-3, -1, 0, 1, 3]), 3)
        np.testing.assert_array_equal(qs.points, [-3, -1, 1, 3])

    def test_constant_weights(self):
        qs = compute_quantiles(np.full(17, 0.2), 5)
        np.testing.assert_array_equal(qs.points, np.full(6, 0.2))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            compute_quantiles(np.array([]), 3)

    def test_uniform_quantiles(self):
        rng = np.random.default_rng(42)
        w = rng.uniform(-1, 1, size=100_000)
        qs = compute_quantiles(w, 5)
        np.testing.assert_allclose(qs.points, -1 + 2 * np.arange(6) / 5, atol=0.01)

    def test_matches_nearest_rank_oracle(self):
        rng = np.random.default_rng(3)
        for size in (5, 11, 100, 999):
            w = rng.normal(size=size)
            s = sorted(w)
            qs = compute_quantiles(w, 5)
            for k in range(1, 5):
                assert qs.points[k] == reference_nearest_rank(s, k, 5)

    def test_bin_mass(self):
        # the k-th inner point has rank ceil(k*N/n), so the mass at or below it
        # is within one sample of k/n
        rng = np.random.default_rng(9)
        w = rng.normal(size=10_001)
        qs = compute_quantiles(w, 3)
        inner = np.searchsorted(np.sort(w), qs.points[1:3], side="right")
        np.testing.assert_allclose(inner / w.size, [1 / 3, 2 / 3], atol=1.5 / w.size)


class TestDeltaEstimation:
    def test_ternary_formula(self):
        assert estimate_delta(QuantileSet([-9, -0.4, 0.6, 9])) == pytest.approx(0.5)

    def test_quinary_formula(self):
        qs = QuantileSet([-9, -0.8, -0.3, 0.3, 0.8, 9])
        assert estimate_delta(qs) == pytest.approx(3 * 2.2 / 8)

    def test_uniform_converges_to_third(self):
        rng = np.random.default_rng(11)
        w = rng.uniform(-1, 1, size=100_000)
        delta = estimate_delta(compute_quantiles(w, 3))
        assert delta == pytest.approx(1 / 3, abs=0.01)

    def test_one_sided_fallback(self):
        # q1 = q2 < 0 drives the formula to zero; the magnitude fallback kicks in
        qs = QuantileSet([-1.0, -0.4, -0.4, 0.0])
        assert estimate_delta(qs) == pytest.approx(0.4)

    def test_degenerate_needs_previous(self):
        zeros = QuantileSet([0.0, 0.0, 0.0, 0.0])
        assert estimate_delta(zeros, prev_delta=0.25) == 0.25
        with pytest.raises(ValueError):
            estimate_delta(zeros)

    def test_calibration_idempotent(self):
        rng = np.random.default_rng(17)
        w = rng.normal(size=50_000)
        d1 = estimate_delta(compute_quantiles(w, 5))
        d2 = estimate_delta(compute_quantiles(w, 5))
        assert abs(d2 - d1) / d1 < 0.01


class TestTau:
    def test_reference_value(self):
        w = np.array([0.5, -0.5, 0.5, -0.5])
        assert mean_abs_norm_factor(w, 0.35) == pytest.approx(0.7)

    def test_unit_case(self):
        assert mean_abs_norm_factor(np.array([1.0, -1.0]), 1.0) == pytest.approx(1.0)

    def test_gaussian_monte_carlo(self):
        # analytic: delta -> Phi^-1(2/3) = 0.430727, mean|W| -> sqrt(2/pi) =
        # 0.797885, tau -> 0.539888
        rng = np.random.default_rng(5)
        w = rng.normal(size=1_000_000)
        delta = estimate_delta(compute_quantiles(w, 3))
        tau = mean_abs_norm_factor(w, delta)
        assert delta == pytest.approx(0.430727, abs=0.005)
        assert tau == pytest.approx(0.539888, abs=0.01)

    def test_all_zero_rejected(self):
        with pytest.raises(ValueError):
            mean_abs_norm_factor(np.zeros(8), 0.5)


def occupancy(values: np.ndarray, levels: np.ndarray) -> np.ndarray:
    return np.array([np.mean(values == lv) for lv in levels])


def calibrated_occupancy(samples: np.ndarray, n: int) -> np.ndarray:
    delta = estimate_delta(compute_quantiles(samples, n))
    spec = QuantizerSpec(n, delta, 1.0)
    return occupancy(linear_symmetric_quantize(samples, spec), spec.level_values())


class TestEquidistribution:
    """Per-level occupancy of quantile-calibrated quantization.

    Ternary calibration is exact for symmetric laws (the step equals the
    tertile). Quinary uses one step for four quantile constraints, which holds
    within 0.02 for uniform and Gaussian but not for Laplace: there the
    analytic central mass is 1 - exp(-(3/8)*2*(ln 2.5 + ln 1.25)/3) = 0.2479.
    The Laplace-quinary case is therefore pinned to its analytic value here;
    the acceptance suite asserts the blanket bound and documents the failure.
    """

    N = 100_000

    def _samples(self, name: str) -> np.ndarray:
        rng = np.random.default_rng(1234)
        if name == "uniform":
            return rng.uniform(-1, 1, size=self.N)
        if name == "gaussian":
            return rng.normal(size=self.N)
        return rng.laplace(size=self.N)

    @pytest.mark.parametrize("dist", ["uniform", "gaussian", "laplace"])
    def test_ternary_within_bound(self, dist):
        occ = calibrated_occupancy(self._samples(dist), 3)
        np.testing.assert_allclose(occ, 1 / 3, atol=0.02)

    @pytest.mark.parametrize("dist", ["uniform", "gaussian"])
    def test_quinary_within_bound(self, dist):
        occ = calibrated_occupancy(self._samples(dist), 5)
        np.testing.assert_allclose(occ, 1 / 5, atol=0.02)

    def test_quinary_laplace_matches_analysis(self):
        occ = calibrated_occupancy(self._samples("laplace"), 5)
        # central level: 1 - exp(-delta/3) with delta = (3/8)*2*(ln 2.5 + ln 1.25)
        delta = 0.75 * (math.log(2.5) + math.log(1.25))
        assert occ[2] == pytest.approx(1 - math.exp(-delta / 3), abs=0.01)
        assert occ[2] > 0.22  # outside the blanket bound, see decisions ledger

    def test_twn_rule_worse_on_uniform(self):
        w = self._samples("uniform")
        for n in (3, 5):
            spec_q = QuantizerSpec(n, estimate_delta(compute_quantiles(w, n)), 1.0)
            occ_q = occupancy(linear_symmetric_quantize(w, spec_q), spec_q.level_values())
            delta_twn = 0.7 * float(np.mean(np.abs(w)))
            spec_t = QuantizerSpec(n, delta_twn, 0.7)
            occ_t = occupancy(linear_symmetric_quantize(w, spec_t), spec_t.level_values())
            assert np.max(np.abs(occ_t - 1 / n)) > np.max(np.abs(occ_q - 1 / n))


class TestBinaryQuantizers:
    def test_sign_values(self):
        np.testing.assert_array_equal(
            sign_binarize(np.array([0.3, -2.0, 0.0])), [1.0, -1.0, 1.0]
        )

    def test_heaviside_values(self):
        np.testing.assert_array_equal(
            heaviside(np.array([0.5, -0.5, 0.0])), [1.0, 0.0, 0.0]
        )

    def test_ste_examples(self):
        assert ste_backward(np.array(0.5), np.array(2.0)) == 2.0
        assert ste_backward(np.array(1.5), np.array(2.0)) == 0.0
        assert ste_backward(np.array(-1.0), np.array(3.0)) == 3.0

    def test_ste_shape_mismatch(self):
        with pytest.raises(ValueError):
            ste_backward(np.zeros(3), np.zeros(4))

    def test_ste_is_clip_derivative(self):
        # finite differences of Clip(x,-1,1) away from the corners
        rng = np.random.default_rng(2)
        x = rng.uniform(-2, 2, size=1000)
        x = x[np.abs(np.abs(x) - 1.0) > 1e-3]
        h = 1e-6
        fd = (np.clip(x + h, -1, 1) - np.clip(x - h, -1, 1)) / (2 * h)
        np.testing.assert_allclose(ste_backward(x, np.ones_like(x)), fd, atol=1e-9)


class TestSpecValidation:
    def test_bad_levels(self):
        with pytest.raises(ValueError):
            QuantizerSpec(4, 0.5, 1.0)
        with pytest.raises(ValueError):
            QuantizerSpec(1, 0.5, 1.0)

    def test_bad_delta(self):
        with pytest.raises(ValueError):
            QuantizerSpec(3, 0.0, 1.0)

    def test_unordered_quantiles(self):
        with pytest.raises(ValueError):
            QuantileSet([0.0, -1.0, 1.0])
