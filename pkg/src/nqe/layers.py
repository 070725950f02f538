"""Layer primitives: quantized convolutions and dense layers, the fixed
random-code-selection projection, normalization wrappers, activations and
pooling. Each layer exposes ``forward`` plus ``params`` for the optimizer;
quantized layers also carry their calibration state.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .normalization import BatchNormState, BsnScale, bn_forward
from .quantizers import (
    QuantizerSpec,
    compute_quantiles,
    estimate_delta,
    mean_abs_norm_factor,
)
from .tensor import Tensor

WEIGHT_LEVELS = (2, 3, 5)


def _uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-limit, limit, size=shape)


class _QuantizedWeights:
    """Shared calibration plumbing for layers with quantized weights."""

    n_levels: int
    w: Tensor
    spec: QuantizerSpec | None

    def _init_quantization(self, n_levels: int):
        if n_levels not in WEIGHT_LEVELS:
            raise ValueError(f"weight levels must be one of {WEIGHT_LEVELS}")
        self.n_levels = n_levels
        self.spec = None
        if n_levels > 2:
            self.recalibrate()

    def recalibrate(self):
        """Re-estimate the quantization step from the current latent weights."""
        if self.n_levels == 2:
            return
        prev = self.spec.delta if self.spec is not None else None
        delta = estimate_delta(compute_quantiles(self.w.data, self.n_levels), prev)
        tau = mean_abs_norm_factor(self.w.data, delta)
        self.spec = QuantizerSpec(self.n_levels, delta, tau)

    def quantized_weights(self) -> Tensor:
        if self.n_levels == 2:
            return T.sign_act(self.w)
        return T.quantize_weights(self.w, self.spec)


class QuantConv2d(_QuantizedWeights):
    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        kernel: int,
        n_levels: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int | None = None,
        bias: bool = False,
        thirds_input: bool = False,
    ):
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.thirds_input = thirds_input
        fan_in = in_ch * kernel * kernel
        self.w = Tensor(
            _uniform_init(rng, (out_ch, in_ch, kernel, kernel), fan_in),
            requires_grad=True,
        )
        self.b = Tensor(np.zeros(out_ch), requires_grad=True) if bias else None
        self._init_quantization(n_levels)

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        if self.thirds_input:
            # Inputs are thirds of small integers (the 2-bit alphabet).
            # x*3 recovers the integer codes exactly, so the accumulation is
            # dyadic and the single trailing division keeps zero crossings
            # exact; summing rounded thirds directly would put noise of
            # arbitrary sign on exactly-cancelling accumulators.
            h = T.conv2d(
                x * 3.0, self.quantized_weights(), stride=self.stride, padding=self.padding
            ) / 3.0
            if self.b is not None:
                h = h + self.b.reshape(1, -1, 1, 1)
            return h
        return T.conv2d(
            x, self.quantized_weights(), self.b, stride=self.stride, padding=self.padding
        )

    def params(self) -> list[Tensor]:
        return [self.w] + ([self.b] if self.b is not None else [])


class GroupConv2d(_QuantizedWeights):
    """Grouped convolution with the structural channel shuffle on the output,
    so the next layer still mixes information across groups."""

    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        kernel: int,
        groups: int,
        n_levels: int,
        rng: np.random.Generator,
    ):
        if in_ch % groups or out_ch % groups:
            raise ValueError(
                f"channels ({in_ch}->{out_ch}) must be divisible by groups={groups}"
            )
        self.in_ch, self.out_ch, self.kernel, self.groups = in_ch, out_ch, kernel, groups
        self.padding = kernel // 2
        fan_in = (in_ch // groups) * kernel * kernel
        self.w = Tensor(
            _uniform_init(rng, (out_ch, in_ch // groups, kernel, kernel), fan_in),
            requires_grad=True,
        )
        self._init_quantization(n_levels)

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        g = self.groups
        ipg, opg = self.in_ch // g, self.out_ch // g
        wq = self.quantized_weights()
        outs = []
        for k in range(g):
            xg = T.slice_channels(x, k * ipg, (k + 1) * ipg)
            wg = T.slice_axis(wq, k * opg, (k + 1) * opg, axis=0)
            outs.append(T.conv2d(xg, wg, padding=self.padding))
        y = T.concat(outs, axis=1)
        return channel_shuffle(y, g)

    def params(self) -> list[Tensor]:
        return [self.w]


def channel_shuffle(x: Tensor, groups: int) -> Tensor:
    n, c = x.shape[0], x.shape[1]
    rest = x.shape[2:]
    y = x.reshape(n, groups, c // groups, *rest)
    order = (0, 2, 1) + tuple(range(3, y.ndim))
    return y.transpose(*order).reshape(n, c, *rest)


class DepthwiseConv2d(_QuantizedWeights):
    def __init__(self, channels: int, kernel: int, n_levels: int, rng: np.random.Generator):
        self.channels, self.kernel = channels, kernel
        self.w = Tensor(
            _uniform_init(rng, (channels, kernel, kernel), kernel * kernel),
            requires_grad=True,
        )
        self._init_quantization(n_levels)

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        if x.shape[2] < self.kernel or x.shape[3] < self.kernel:
            raise ValueError(
                f"kernel {self.kernel} larger than input {x.shape[2]}x{x.shape[3]}"
            )
        return T.depthwise_conv2d(x, self.quantized_weights())

    def params(self) -> list[Tensor]:
        return [self.w]


class QuantDense(_QuantizedWeights):
    def __init__(self, in_units: int, out_units: int, n_levels: int, rng: np.random.Generator):
        self.in_units, self.out_units = in_units, out_units
        self.w = Tensor(
            _uniform_init(rng, (in_units, out_units), in_units), requires_grad=True
        )
        self._init_quantization(n_levels)

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        return x @ self.quantized_weights()

    def params(self) -> list[Tensor]:
        return [self.w]


class RcsDense:
    """Fixed Rademacher +-1 projection, regenerated from its seed on load:
    the matrix is never stored and never trained."""

    def __init__(self, in_units: int, out_units: int, seed: int):
        self.in_units, self.out_units, self.seed = in_units, out_units, seed
        rng = np.random.default_rng(seed)
        self.matrix = rng.integers(0, 2, size=(in_units, out_units)) * 2.0 - 1.0
        self._const = Tensor(self.matrix)

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        return x @ self._const

    def params(self) -> list[Tensor]:
        return []


class BatchNormLayer:
    """BN while training from scratch; a frozen bitshift after conversion."""

    def __init__(self, channels: int, eps: float = 1e-3, momentum: float = 0.99):
        self.state = BatchNormState.create(channels, eps=eps, momentum=momentum)
        self.bsn: BsnScale | None = None

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        if self.bsn is not None:
            return x * 2.0**self.bsn.shift_exp
        return bn_forward(x, self.state, mode)

    def params(self) -> list[Tensor]:
        if self.bsn is not None:
            return []
        return [self.state.gamma, self.state.beta]


class ActivationLayer:
    KINDS = ("sign", "heaviside", "hwmsb", "none")

    def __init__(self, kind: str):
        if kind not in self.KINDS:
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        if self.kind == "sign":
            return T.sign_act(x)
        if self.kind == "heaviside":
            return T.heaviside_act(x)
        if self.kind == "hwmsb":
            return T.hwmsb_act(x)
        return x

    def params(self) -> list[Tensor]:
        return []


class MaxPool2Layer:
    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        return T.maxpool2(x)

    def params(self) -> list[Tensor]:
        return []


class Flatten:
    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        return x.reshape(x.shape[0], -1)

    def params(self) -> list[Tensor]:
        return []
