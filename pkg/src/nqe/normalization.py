"""Batch normalization and its power-of-two replacement.

Training starts with standard per-channel BN; for deployment each BN layer
collapses to a single bias-free bitshift: the 0.9-quantile of the per-channel
scales |gamma_hat| is snapped down to a power of two, which the integer path
applies as an exponent bump. Consumers that only look at signs or at the
argmax make even that shift unnecessary, hence the elision query.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

log = logging.getLogger(__name__)

SHIFT_MIN, SHIFT_MAX = -8, 7


@dataclass
class BatchNormState:
    """Per-channel affine normalization with moving statistics.

    gamma/beta are trainable (autodiff tensors); the moving statistics are
    plain arrays updated outside the graph. Single writer per layer.
    """

    gamma: Tensor
    beta: Tensor
    moving_mean: np.ndarray
    moving_var: np.ndarray
    eps: float = 1e-3
    momentum: float = 0.99

    def __post_init__(self):
        c = self.gamma.data.shape
        if not (self.beta.data.shape == self.moving_mean.shape == self.moving_var.shape == c):
            raise ValueError("batch-norm vectors must share one channel shape")
        if np.any(self.moving_var < 0):
            raise ValueError("moving variance must be non-negative")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if not 0 < self.momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")

    @classmethod
    def create(cls, channels: int, eps: float = 1e-3, momentum: float = 0.99):
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True),
            beta=Tensor(np.zeros(channels), requires_grad=True),
            moving_mean=np.zeros(channels),
            moving_var=np.ones(channels),
            eps=eps,
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return self.gamma.data.shape[0]


def _per_channel(v, ndim: int):
    """Reshape a channel vector for broadcasting against NC... layout."""
    shape = (1, -1) + (1,) * (ndim - 2)
    return v.reshape(shape)


def bn_forward(x: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    """Normalize over all axes but the channel axis (axis 1).

    Train mode uses batch statistics (biased variance) and updates the moving
    averages in place; infer mode applies the folded affine gamma_hat*x +
    beta_hat built from the moving statistics.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    if x.shape[1] != state.channels:
        raise ValueError(f"expected {state.channels} channels, got {x.shape[1]}")
    if mode == "infer":
        gh, bh = gamma_hat(state)
        return x * Tensor(_per_channel(gh, x.ndim)) + Tensor(_per_channel(bh, x.ndim))

    axes = (0,) + tuple(range(2, x.ndim))
    # variance is undefined from a single sample; feature maps count every
    # spatial position, so batch-1 full frames remain trainable
    if int(np.prod([x.shape[a] for a in axes])) < 2:
        raise ValueError("train-mode normalization needs at least 2 samples per channel")
    m = x.mean(axis=axes, keepdims=True)
    centered = x - m
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv = (var + state.eps).sqrt()
    y = centered / inv * _per_channel(state.gamma, x.ndim) + _per_channel(
        state.beta, x.ndim
    )
    mom = state.momentum
    state.moving_mean = mom * state.moving_mean + (1 - mom) * m.data.reshape(-1)
    state.moving_var = mom * state.moving_var + (1 - mom) * var.data.reshape(-1)
    return y


def gamma_hat(state: BatchNormState) -> tuple[np.ndarray, np.ndarray]:
    """The equivalent scale-and-offset form: gamma_hat*x + beta_hat."""
    gh = state.gamma.data / np.sqrt(state.moving_var + state.eps)
    bh = state.beta.data - gh * state.moving_mean
    return gh, bh


@dataclass(frozen=True)
class BsnScale:
    """A layer-wide bias-free power-of-two rescaling y = 2^shift_exp * x."""

    shift_exp: int
    source_quantile: float = field(default=float("nan"))

    def __post_init__(self):
        if not SHIFT_MIN <= self.shift_exp <= SHIFT_MAX:
            raise ValueError(f"shift must fit 4 signed bits, got {self.shift_exp}")


def fold_to_bsn(state: BatchNormState) -> BsnScale:
    """Collapse a trained BN layer to one bitshift.

    Takes the nearest-rank 0.9-quantile of the per-channel |gamma_hat| and
    floors its log2. The offset beta_hat is dropped entirely. Channel signs
    are not represented here; callers fold negative gamma_hat signs into the
    preceding layer's weights (see convert helpers in the layer module).
    """
    gh = np.abs(gamma_hat(state)[0])
    if not np.any(gh > 0):
        raise ValueError("all channel scales are zero; layer is degenerate")
    c = gh.size
    rank = math.ceil(0.9 * c)
    gtilde = float(np.sort(gh)[rank - 1])
    if gtilde <= 0:
        # quantile landed on a dead channel; use the largest live scale
        gtilde = float(gh.max())
    _, e = np.frexp(gtilde)
    shift = int(e) - 1
    if not SHIFT_MIN <= shift <= SHIFT_MAX:
        clamped = min(max(shift, SHIFT_MIN), SHIFT_MAX)
        log.warning("bitshift %d outside 4-bit range, clamped to %d", shift, clamped)
        shift = clamped
    return BsnScale(shift_exp=shift, source_quantile=gtilde)


def bsn_apply(x: np.ndarray, scale: BsnScale) -> np.ndarray:
    """Exact multiplication by 2^shift_exp (an exponent bump, never a rounding)."""
    return np.asarray(x, dtype=np.float64) * 2.0**scale.shift_exp


class Elision(enum.Enum):
    ELIDE = "elide"
    ABSORB_INTO_HWMSB = "absorb-into-hwmsb"
    KEEP = "keep"


def elide_bsn(consumer: str | None) -> Elision:
    """Decide whether a BSN needs to exist at inference time.

    ``consumer`` names the operation that reads the BSN output, after looking
    through pooling: sign and heaviside only see the sign, and the logits
    readout only sees the order, so a positive scaling is invisible to them.
    An HWMSB consumer absorbs the shift into its reference position. Anything
    else (or an unknown consumer) keeps the shift.
    """
    if consumer in ("sign", "heaviside", "logits"):
        return Elision.ELIDE
    if consumer == "hwmsb":
        return Elision.ABSORB_INTO_HWMSB
    return Elision.KEEP
