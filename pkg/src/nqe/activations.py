"""MSB-position activation quantizers.

MSB compresses the dynamic range by keeping only the position of the most
significant bit of |x| (capped to [-1, 1] and linear below 1/8). HWMSB is its
half-wave variant: negatives are zeroed, leaving the 2-bit alphabet
{0, 1/3, 2/3, 1} encoded as codes {0, 1, 2, 3}. The divisor 3 is a fixed
constant of the alphabet; the integer form never materializes it (codes are
carried as-is, values are code/3 symbolically).
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

LN2 = float(np.log(2.0))

# Bin edges of the 2-bit mapping; a value exactly on an edge belongs to the
# upper bin.
_EDGES = (0.125, 0.25, 0.5)


@dataclass(frozen=True)
class HwmsbCode:
    """One 2-bit activation sample; the represented real is exactly code/3."""

    code: int

    def __post_init__(self) -> None:
        if self.code not in (0, 1, 2, 3):
            raise ValueError(f"code must be in {{0,1,2,3}}, got {self.code}")

    @property
    def value(self) -> Fraction:
        return Fraction(self.code, 3)


@dataclass(frozen=True)
class ReferencePosition:
    """Exponent offset locating the first significant bit (default 4).

    Absorbing a pre-multiplication by 2**s is exactly bias -> bias + s.
    """

    bias: int = 4


def msb_real(x: np.ndarray) -> np.ndarray:
    """Continuous MSB companding: sign(x)*min((4+log2|x|)/3, 1) for |x| >= 1/8, else 8x/3."""
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    inner = 8.0 * x / 3.0
    # log2 evaluated on a safe copy; the inner branch masks |x| < 1/8
    safe = np.where(ax >= 0.125, ax, 1.0)
    outer = np.sign(x) * np.minimum((4.0 + np.log2(safe)) / 3.0, 1.0)
    return np.where(ax >= 0.125, outer, inner)


def _floor_log2(ax: np.ndarray) -> np.ndarray:
    """Exact floor(log2(ax)) for positive ax via frexp (no log rounding)."""
    _, e = np.frexp(ax)
    return e.astype(np.int64) - 1


def msb_quantize(x: np.ndarray) -> np.ndarray:
    """Signed MSB-position quantizer: sign(x)*min(floor(4+log2|x|), 3)/3, zero below 1/8.

    The floor is computed from the binary exponent directly, so inputs exactly
    on a power-of-two edge always land in the upper bin.
    """
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    k = np.minimum(_floor_log2(np.where(ax > 0, ax, 1.0)) + 4, 3)
    q = np.sign(x) * k / 3.0
    return np.where(ax >= 0.125, q, 0.0)


def msb_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Straight-through gradient of the MSB quantizer.

    1/(3|x| ln 2) for 1/8 <= |x| <= 1, 8/3 for |x| < 1/8, 0 for |x| > 1.
    This is the log-regime slope kept across the whole active range: msb_real
    itself is flat on (1/2, 1], but the estimator deliberately lets gradient
    flow there so the top bin stays trainable.
    """
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if x.shape != upstream.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {upstream.shape}")
    ax = np.abs(x)
    g = np.where(ax < 0.125, 8.0 / 3.0, 1.0 / (3.0 * np.where(ax > 0, ax, 1.0) * LN2))
    g = np.where(ax > 1.0, 0.0, g)
    return upstream * g


def hwmsb(x: np.ndarray) -> np.ndarray:
    """Half-wave MSB: 2-bit codes {0,1,2,3} for the values {0, 1/3, 2/3, 1}.

    Negatives and |x| < 1/8 give 0; otherwise the code is the capped MSB
    position (edges 0.125/0.25/0.5 belong to the upper bin).
    """
    x = np.asarray(x, dtype=np.float64)
    codes = np.zeros(x.shape, dtype=np.uint8)
    codes[x >= _EDGES[0]] = 1
    codes[x >= _EDGES[1]] = 2
    codes[x >= _EDGES[2]] = 3
    return codes


def hwmsb_value(codes: np.ndarray) -> np.ndarray:
    """Real-valued materialization code/3 used on the float training path."""
    return np.asarray(codes, dtype=np.float64) / 3.0


def hwmsb_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Straight-through gradient of HWMSB.

    The MSB gradient on the kept branch x in [1/8, 1], the inner slope 8/3 for
    |x| < 1/8 on both signs, zero for x < -1/8 and x > 1 (half-wave gate).
    """
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if x.shape != upstream.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {upstream.shape}")
    ax = np.abs(x)
    g = np.where(ax < 0.125, 8.0 / 3.0, 0.0)
    kept = (x >= 0.125) & (x <= 1.0)
    g = np.where(kept, 1.0 / (3.0 * np.where(ax > 0, ax, 1.0) * LN2), g)
    return upstream * g


def _bit_length(a: np.ndarray) -> np.ndarray:
    """Bit length of non-negative integers, computed with integer shifts only."""
    v = a.astype(np.int64, copy=True)
    out = np.zeros(v.shape, dtype=np.int64)
    for shift in (32, 16, 8, 4, 2, 1):
        m = v >= (np.int64(1) << np.int64(shift))
        out[m] += shift
        v[m] >>= shift
    return out + (v > 0)


def hwmsb_integer(
    acc: np.ndarray, scale_exp: int, ref: ReferencePosition = ReferencePosition()
) -> np.ndarray:
    """HWMSB on an integer accumulator: hwmsb(acc * 2**(scale_exp + ref.bias - 4)).

    Computed by leading-one position extraction: for acc > 0 the code is
    Clip(bit_length(acc) + scale_exp + ref.bias - 1, 0, 3); acc <= 0 gives 0.
    Integer arithmetic throughout, exact for any accumulator width the
    lowered path produces.
    """
    acc = np.asarray(acc)
    if not np.issubdtype(acc.dtype, np.integer):
        raise TypeError(f"accumulator must be an integer array, got {acc.dtype}")
    pos = acc > 0
    codes = np.zeros(acc.shape, dtype=np.uint8)
    if np.any(pos):
        p = _bit_length(acc[pos]) + (scale_exp + ref.bias - 1)
        codes[pos] = np.clip(p, 0, 3).astype(np.uint8)
    return codes
