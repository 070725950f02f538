"""Weight quantizers and their calibration.

Linear symmetric quantization to an odd number of levels in [-1, 1], with the
step delta estimated from empirical weight quantiles so that every level
receives roughly equal mass. Binary weights use a plain sign, activations a
Heaviside; both train through a clipped-identity straight-through estimator.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class QuantizerSpec:
    """Level count, step and mean-absolute norm factor of one weight layer.

    n_levels is odd and >= 3 (3 = ternary, 5 = quinary). Outputs of the
    quantizer lie on the grid {2k/(n-1)} inside [-1, 1], so quinary gives
    {0, +-0.5, +-1} and ternary {-1, 0, +1}.
    """

    n_levels: int
    delta: float
    tau: float

    def __post_init__(self) -> None:
        if self.n_levels < 3 or self.n_levels % 2 == 0:
            raise ValueError(f"n_levels must be odd and >= 3, got {self.n_levels}")
        if not (self.delta > 0):
            raise ValueError(f"delta must be positive, got {self.delta}")
        if not (self.tau > 0):
            raise ValueError(f"tau must be positive, got {self.tau}")

    def level_values(self) -> np.ndarray:
        half = (self.n_levels - 1) // 2
        return np.arange(-half, half + 1) * (2.0 / (self.n_levels - 1))


@dataclass
class QuantileSet:
    """Ordered cut points q_0..q_n dividing a weight sample into n equal-mass bins."""

    points: np.ndarray

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64)
        if np.any(np.diff(self.points) < 0):
            raise ValueError("quantile points must be non-decreasing")

    @property
    def n(self) -> int:
        return len(self.points) - 1


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer with halves away from zero (preserves odd symmetry)."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def linear_symmetric_quantize(x: np.ndarray, spec: QuantizerSpec) -> np.ndarray:
    """Quantize to the grid {2k/(n-1)}: q(x) = 2/(n-1) * Clip(round((n-2)x/(2 delta))).

    For n=3 the decision thresholds sit at +-delta; for n=5 at +-delta/3 and
    +-delta. Output values are exact in float64 (dyadic for n=3 and n=5).
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        idx = tuple(int(i) for i in np.argwhere(~np.isfinite(x))[0])
        raise ValueError(f"non-finite weight at index {idx}")
    n = spec.n_levels
    half = (n - 1) / 2.0
    codes = round_half_away(x * ((n - 2) / (2.0 * spec.delta)))
    codes = np.clip(codes, -half, half)
    return codes * (2.0 / (n - 1))


def compute_quantiles(weights: np.ndarray, n_levels: int) -> QuantileSet:
    """Nearest-rank empirical quantiles q_0..q_n of the flattened weights.

    q_0 is the minimum, q_n the maximum, and q_k for 0 < k < n the
    ceil(k*N/n)-th smallest sample.
    """
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.size == 0:
        raise ValueError("cannot compute quantiles of an empty tensor")
    if n_levels < 3 or n_levels % 2 == 0:
        raise ValueError(f"n_levels must be odd and >= 3, got {n_levels}")
    s = np.sort(w)
    count = s.size
    ranks = np.ceil(np.arange(1, n_levels) * count / n_levels).astype(np.int64) - 1
    points = np.concatenate(([s[0]], s[ranks], [s[-1]]))
    return QuantileSet(points)


def estimate_delta(quantiles: QuantileSet, prev_delta: float | None = None) -> float:
    """Step estimate matching quantile points to the quantizer thresholds.

    n=3: delta = (|q_1| + q_2)/2 so that q_1, q_2 land on -delta, +delta.
    n=5: delta = 3(|q_1| + |q_2| + q_3 + q_4)/8, matching -delta, -delta/3,
    +delta/3, +delta on average.

    A non-positive result (strongly one-sided sample) falls back to
    max(|q_1|, |q_{n-1}|); if that is still zero the previous delta is kept
    so a transiently collapsed layer does not abort training.
    """
    q = quantiles.points
    n = quantiles.n
    if n == 3:
        delta = (abs(q[1]) + q[2]) / 2.0
    elif n == 5:
        delta = 3.0 * (abs(q[1]) + abs(q[2]) + q[3] + q[4]) / 8.0
    else:
        raise ValueError(f"delta estimation is defined for n in {{3, 5}}, got {n}")
    if not (delta > 0) or not np.isfinite(delta):
        fallback = max(abs(q[1]), abs(q[n - 1]))
        log.warning("degenerate delta %r, falling back to max(|q_1|,|q_%d|)=%r", delta, n - 1, fallback)
        delta = fallback
        if delta <= 0:
            if prev_delta is None or not (prev_delta > 0):
                raise ValueError("all-zero weight sample and no previous delta to keep")
            log.warning("all-zero weight sample, keeping previous delta %r", prev_delta)
            delta = prev_delta
    return float(delta)


def mean_abs_norm_factor(weights: np.ndarray, delta: float) -> float:
    """Factor tau relating the step to the mean absolute weight: delta = tau * mean|W|."""
    w = np.asarray(weights, dtype=np.float64).ravel()
    total = np.sum(np.abs(w))
    if total == 0:
        raise ValueError("tau is undefined for all-zero weights")
    return float(w.size * delta / total)


def sign_binarize(x: np.ndarray) -> np.ndarray:
    """Binary quantizer: +1 for x >= 0, -1 for x < 0 (tie at zero maps to +1)."""
    x = np.asarray(x)
    return np.where(x >= 0, 1.0, -1.0)


def heaviside(x: np.ndarray) -> np.ndarray:
    """Step activation: 1 for x > 0, 0 otherwise (tie at zero maps to 0)."""
    x = np.asarray(x)
    return np.where(x > 0, 1.0, 0.0)


def ste_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Clipped-identity straight-through gradient: upstream where |x| <= 1, else 0."""
    x = np.asarray(x)
    upstream = np.asarray(upstream)
    if x.shape != upstream.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {upstream.shape}")
    return np.where(np.abs(x) <= 1.0, upstream, 0.0)
