"""MSB / HWMSB activation tests.

Oracles: a literal four-row threshold table evaluated scalar-by-scalar,
centered finite differences of msb_real, and int.bit_length for the
shift-based leading-one extraction.
"""

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nqe.activations import (
    HwmsbCode,
    ReferencePosition,
    _bit_length,
    hwmsb,
    hwmsb_backward,
    hwmsb_integer,
    hwmsb_value,
    msb_backward,
    msb_quantize,
    msb_real,
)


def table_row(x: float) -> int:
    """The published four-row mapping, spelled out with literal thresholds."""
    if x < 0.125:
        return 0
    if x < 0.25:
        return 1
    if x < 0.5:
        return 2
    return 3


def sign_magnitude_values(bits: int) -> np.ndarray:
    """All 2^bits sign+magnitude fixed-point values scaled into (-1, 1)."""
    mag_bits = bits - 1
    m = np.arange(2**mag_bits, dtype=np.float64)
    scale = 2.0**-mag_bits
    return np.concatenate([m * scale, -m * scale])


class TestMsbReal:
    def test_boundary_continuity(self):
        assert msb_real(np.array(0.125)) == pytest.approx(1 / 3)
        assert msb_real(np.array(0.125 - 1e-12)) == pytest.approx(1 / 3, abs=1e-11)

    def test_examples(self):
        assert msb_real(np.array(1.0)) == 1.0
        assert msb_real(np.array(-0.5)) == -1.0
        assert msb_real(np.array(0.01)) == pytest.approx(0.08 / 3)

    def test_saturation(self):
        np.testing.assert_array_equal(msb_real(np.array([2.0, -7.0])), [1.0, -1.0])

    def test_odd(self):
        x = np.linspace(-3, 3, 601)
        np.testing.assert_allclose(msb_real(-x), -msb_real(x), atol=1e-15)


class TestMsbQuantize:
    def test_examples(self):
        assert msb_quantize(np.array(0.3)) == pytest.approx(2 / 3)
        assert msb_quantize(np.array(-0.3)) == pytest.approx(-2 / 3)
        assert msb_quantize(np.array(0.1)) == 0.0
        assert msb_quantize(np.array(0.125)) == pytest.approx(1 / 3)
        assert msb_quantize(np.array(0.6)) == 1.0
        assert msb_quantize(np.array(4.0)) == 1.0

    def test_power_of_two_edges_bin_upward(self):
        # exact edges open a new bin; one ulp below stays in the old one
        for edge, lo_k, hi_k in [(0.125, 0, 1), (0.25, 1, 2), (0.5, 2, 3)]:
            below = np.nextafter(edge, 0.0)
            assert msb_quantize(np.array(edge)) == pytest.approx(hi_k / 3)
            assert msb_quantize(np.array(below)) == pytest.approx(lo_k / 3)

    def test_monotone(self):
        x = np.sort(np.random.default_rng(0).uniform(-2, 2, size=2000))
        assert np.all(np.diff(msb_quantize(x)) >= 0)


class TestMsbBackward:
    def test_regime_values(self):
        g = msb_backward(np.array([0.125, 0.01, 0.5, 1.5, -0.3]), np.ones(5))
        assert g[0] == pytest.approx(1 / (3 * 0.125 * np.log(2)))
        assert g[0] == pytest.approx(3.8472, abs=1e-4)
        assert g[1] == pytest.approx(8 / 3)
        assert g[2] == pytest.approx(0.9618, abs=1e-4)
        assert g[3] == 0.0
        assert g[4] == pytest.approx(1 / (3 * 0.3 * np.log(2)))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            msb_backward(np.zeros(2), np.zeros(3))

    def test_finite_differences(self):
        # the rule equals the analytic slope of msb_real on (1/8, 1/2); the
        # curve is flat beyond 1/2, which the saturation test below covers
        h = 1e-7
        rng = np.random.default_rng(13)
        x = rng.uniform(0.125 + 2 * h, 0.5 - 2 * h, size=1000)
        x = np.concatenate([x, -x])
        fd = (msb_real(x + h) - msb_real(x - h)) / (2 * h)
        np.testing.assert_allclose(msb_backward(x, np.ones_like(x)), fd, rtol=1e-4)

    def test_gradient_flows_through_saturated_bin(self):
        # msb_real is constant 1 on [1/2, 1] but the estimator keeps the
        # log-regime slope there so the top bin stays trainable
        x = np.linspace(0.55, 0.99, 20)
        fd = (msb_real(x + 1e-7) - msb_real(x - 1e-7)) / 2e-7
        np.testing.assert_allclose(fd, 0.0, atol=1e-12)
        g = msb_backward(x, np.ones_like(x))
        np.testing.assert_allclose(g, 1 / (3 * x * np.log(2)))

    def test_scales_upstream(self):
        x = np.array([0.3, 0.01])
        up = np.array([2.0, -1.5])
        np.testing.assert_allclose(
            msb_backward(x, up), up * msb_backward(x, np.ones(2))
        )


class TestHwmsb:
    def test_examples(self):
        assert hwmsb(np.array(0.6)) == 3
        assert hwmsb(np.array(0.2)) == 1
        assert hwmsb(np.array(-0.9)) == 0
        assert hwmsb(np.array(-0.0)) == 0

    def test_code_dtype(self):
        assert hwmsb(np.zeros(4)).dtype == np.uint8

    def test_table_conformance_8bit(self):
        x = sign_magnitude_values(8)
        got = hwmsb(x)
        want = [table_row(v) for v in x]
        np.testing.assert_array_equal(got, want)

    def test_table_conformance_16bit(self):
        x = sign_magnitude_values(16)
        got = hwmsb(x)
        want = np.select(
            [x < 0.125, x < 0.25, x < 0.5], [0, 1, 2], default=3
        )
        np.testing.assert_array_equal(got, want)

    def test_values(self):
        codes = np.array([0, 1, 2, 3], dtype=np.uint8)
        np.testing.assert_allclose(hwmsb_value(codes), [0, 1 / 3, 2 / 3, 1])
        assert HwmsbCode(2).value == Fraction(2, 3)
        with pytest.raises(ValueError):
            HwmsbCode(4)

    def test_alphabet_round_trip(self):
        # 0 and 1 are the only fixed points of value∘hwmsb: the bin edges are
        # powers of two, so 1/3 and 2/3 each land one bin up
        assert hwmsb(np.array(0.0)) == 0
        assert hwmsb(np.array(1.0)) == 3
        assert hwmsb(np.array(1 / 3)) == 2
        assert hwmsb(np.array(2 / 3)) == 3

    @given(st.lists(st.floats(-4, 4), min_size=2, max_size=64))
    def test_monotone(self, xs):
        x = np.sort(np.array(xs))
        assert np.all(np.diff(hwmsb(x).astype(np.int64)) >= 0)


class TestHwmsbBackward:
    def test_regimes(self):
        x = np.array([0.05, -0.05, 0.5, 1.5, -0.3])
        g = hwmsb_backward(x, np.ones(5))
        assert g[0] == pytest.approx(8 / 3)
        assert g[1] == pytest.approx(8 / 3)
        assert g[2] == pytest.approx(1 / (1.5 * np.log(2)))
        assert g[3] == 0.0
        assert g[4] == 0.0

    def test_matches_msb_on_positive_branch(self):
        x = np.linspace(0.13, 0.99, 50)
        np.testing.assert_allclose(
            hwmsb_backward(x, np.ones(50)), msb_backward(x, np.ones(50))
        )


class TestHwmsbInteger:
    def test_zero_and_negative(self):
        acc = np.array([0, -5, -32768], dtype=np.int32)
        np.testing.assert_array_equal(hwmsb_integer(acc, 0), [0, 0, 0])

    def test_requires_integers(self):
        with pytest.raises(TypeError):
            hwmsb_integer(np.array([1.0]), 0)

    def test_real_value_point_three(self):
        # 77 * 2^-8 = 0.30078... and 9830 * 2^-15 = 0.29998...: both in bin 2
        assert hwmsb_integer(np.array([77]), -8) == 2
        assert hwmsb_integer(np.array([9830]), -15) == 2

    def test_edges(self):
        # acc * 2^-15 at the exact bin edges
        acc = np.array([4096, 4095, 8192, 16384, 32767], dtype=np.int64)
        np.testing.assert_array_equal(hwmsb_integer(acc, -15), [1, 0, 2, 3, 3])

    def test_matches_float_hwmsb_all_biases(self):
        m = np.arange(2**15, dtype=np.int64)
        acc = np.concatenate([m, -m])
        x = acc.astype(np.float64) * 2.0**-15
        for bias in range(-8, 9):
            ref = ReferencePosition(bias=bias)
            got = hwmsb_integer(acc, -15, ref)
            want = hwmsb(x * 2.0 ** (bias - 4))
            np.testing.assert_array_equal(got, want, err_msg=f"bias={bias}")

    def test_shift_absorption(self):
        rng = np.random.default_rng(21)
        acc = rng.integers(-(2**14), 2**14, size=512)
        x = acc.astype(np.float64) * 2.0**-12
        got = hwmsb_integer(acc, -12, ReferencePosition(bias=4 - 2))
        np.testing.assert_array_equal(got, hwmsb(x * 2.0**-2))


class TestBitLength:
    def test_matches_int_bit_length(self):
        n = np.arange(65536, dtype=np.int64)
        want = np.array([int(v).bit_length() for v in range(65536)])
        np.testing.assert_array_equal(_bit_length(n), want)

    def test_wide_values(self):
        n = np.array([2**30 - 1, 2**30, 2**31 - 1], dtype=np.int64)
        np.testing.assert_array_equal(_bit_length(n), [30, 31, 31])
