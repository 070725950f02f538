"""Topology builders.

The encoder is a VGG-style trunk of six quantized conv modules, a bottleneck
that funnels the trunk output into a 4F-bit code, and a linear classifier
head. The decoder reconstructs image patches from codes: a transpose-conv
patch upsampler, optional aggregation of patches into a mosaic, and a shared
refinement stage with residual-concatenation blocks and a softmax gate.

``nqe_layer_table`` is the single source of truth for layer shapes and
precisions; the builder and the hardware cost model both consume it.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .layers import (
    ActivationLayer,
    BatchNormLayer,
    DepthwiseConv2d,
    Flatten,
    GroupConv2d,
    MaxPool2Layer,
    QuantConv2d,
    QuantDense,
    RcsDense,
    _uniform_init,
)
from .normalization import fold_to_bsn, gamma_hat
from .tensor import Tensor

BOTTLENECK_KINDS = ("lfc", "rcs_fc", "dwconv_fc")
DECODER_VARIANTS = ("purenet", "pi_purenet", "bbd")

_BITS = {5: 3, 3: 2, 2: 1}  # naive storage bits per weight


@dataclass(frozen=True)
class ModelConfig:
    F: int = 64
    G: int = 4
    bottleneck_kind: str = "dwconv_fc"
    weight_mode: str = "mixed"
    input_hw: int = 32
    num_classes: int = 10
    seed: int = 0
    decoder: "PurenetConfig | None" = None

    def __post_init__(self):
        if self.F < 8 or self.F % 4:
            raise ValueError(f"F must be >= 8 and divisible by 4, got {self.F}")
        if self.bottleneck_kind not in BOTTLENECK_KINDS:
            raise ValueError(f"bottleneck_kind must be one of {BOTTLENECK_KINDS}")
        if self.weight_mode not in ("mixed", "binary"):
            raise ValueError("weight_mode must be 'mixed' or 'binary'")
        if self.input_hw % 8 or self.input_hw < 8:
            raise ValueError("input_hw must be a positive multiple of 8")

    @property
    def code_units(self) -> int:
        return 4 * self.F

    @property
    def trunk_hw(self) -> int:
        return self.input_hw // 8


@dataclass(frozen=True)
class PurenetConfig:
    n_feature: int = 32
    pu_channels: tuple[int, ...] = (128, 64, 32, 32)
    rc_blocks: int = 3
    variant: str = "purenet"
    patch: int = 32

    def __post_init__(self):
        if self.variant not in DECODER_VARIANTS:
            raise ValueError(f"variant must be one of {DECODER_VARIANTS}")
        if 2 ** (len(self.pu_channels) + 1) != self.patch:
            raise ValueError(
                f"{len(self.pu_channels)} stride-2 stages plus the x2 refinement "
                f"cannot reach patch size {self.patch} from 1x1"
            )
        if self.pu_channels[-1] != self.n_feature:
            raise ValueError("last upsampler stage must emit n_feature channels")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    kernel: int
    in_ch: int
    out_ch: int
    groups: int
    weight_levels: int  # quantizer levels: 5, 3 or 2
    input_precision: int  # activation bits feeding this layer
    activation: str  # activation applied after this layer's normalization
    out_hw: int
    params: int
    macs: int

    def __post_init__(self):
        if self.weight_levels not in _BITS:
            raise ValueError(f"unsupported weight levels {self.weight_levels}")
        if self.input_precision not in (1, 2, 8):
            raise ValueError(f"unsupported input precision {self.input_precision}")
        if self.activation not in ("hwmsb", "heaviside", "sign", "none"):
            raise ValueError(f"unsupported activation {self.activation}")

    @property
    def weight_bits(self) -> int:
        return _BITS[self.weight_levels]


def nqe_layer_table(cfg: ModelConfig) -> list[LayerSpec]:
    """Weighted layers of the encoder stack with shapes, precisions and MACs."""
    F, hw = cfg.F, cfg.input_hw
    mixed = cfg.weight_mode == "mixed"
    q5, q3 = (5, 3) if mixed else (2, 2)
    act2 = "hwmsb" if mixed else "sign"
    prec2 = 2 if mixed else 1
    s4 = cfg.trunk_hw
    rows = [
        LayerSpec("conv1", "conv", 3, 3, F, 1, q5, 8, "sign", hw, 27 * F, 27 * F * hw * hw),
        LayerSpec("conv2", "conv", 3, F, F, 1, q5, 1, act2, hw, 9 * F * F, 9 * F * F * hw * hw),
        LayerSpec("conv3", "conv", 3, F, 2 * F, 1, q3, prec2, "sign", hw // 2,
                  18 * F * F, 18 * F * F * (hw // 2) ** 2),
        LayerSpec("conv4", "conv", 3, 2 * F, 2 * F, 1, q3, 1, act2, hw // 2,
                  36 * F * F, 36 * F * F * (hw // 2) ** 2),
        LayerSpec("conv5", "conv", 3, 2 * F, 4 * F, 1, 2, prec2, "sign", hw // 4,
                  72 * F * F, 72 * F * F * (hw // 4) ** 2),
        LayerSpec("gc", "group_conv", 3, 4 * F, 4 * F, cfg.G, 2, 1, "heaviside", hw // 4,
                  9 * 16 * F * F // cfg.G, 9 * 16 * F * F // cfg.G * (hw // 4) ** 2),
    ]
    flat = 4 * F * s4 * s4
    if cfg.bottleneck_kind == "dwconv_fc":
        rows.append(LayerSpec("dw", "depthwise_conv", s4, 4 * F, 4 * F, 4 * F, 2, 1,
                              "none", 1, s4 * s4 * 4 * F, s4 * s4 * 4 * F))
        rows.append(LayerSpec("fc", "dense", 1, 4 * F, 4 * F, 1, 2, 1, "heaviside", 1,
                              16 * F * F, 16 * F * F))
    elif cfg.bottleneck_kind == "lfc":
        rows.append(LayerSpec("lfc", "dense", 1, flat, 4 * F, 1, 2, 1, "heaviside", 1,
                              flat * 4 * F, flat * 4 * F))
    else:
        # the Rademacher projection is regenerated from a seed: zero stored bits
        rows.append(LayerSpec("rcs", "dense", 1, flat, 4 * F, 1, 2, 1, "none", 1,
                              0, flat * 4 * F))
        rows.append(LayerSpec("fc", "dense", 1, 4 * F, 4 * F, 1, 2, 1, "heaviside", 1,
                              16 * F * F, 16 * F * F))
    rows.append(LayerSpec("classifier", "dense", 1, 4 * F, cfg.num_classes, 1, 2, 1,
                          "none", 1, 4 * F * cfg.num_classes, 4 * F * cfg.num_classes))
    return rows


class Net:
    """An ordered stack of named layers with a marked code readout point."""

    def __init__(self, config: ModelConfig, steps, code_step: str):
        self.config = config
        self.steps: list[tuple[str, object]] = steps
        self.code_step = code_step
        names = [n for n, _ in steps]
        if code_step not in names:
            raise ValueError(f"code step {code_step!r} not in model")
        if len(set(names)) != len(names):
            raise ValueError("duplicate step names")

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        for _, layer in self.steps:
            x = layer.forward(x, mode)
        return x

    def encode(self, x: Tensor, mode: str = "infer") -> Tensor:
        for name, layer in self.steps:
            x = layer.forward(x, mode)
            if name == self.code_step:
                return x.reshape(x.shape[0], -1)
        raise AssertionError("unreachable")

    def params(self) -> list[Tensor]:
        out = []
        for _, layer in self.steps:
            out.extend(layer.params())
        return out

    def recalibrate(self):
        for _, layer in self.steps:
            if hasattr(layer, "recalibrate"):
                layer.recalibrate()

    def quantized_layers(self):
        return [(n, l) for n, l in self.steps if hasattr(l, "quantized_weights")]

    def norm_layers(self):
        return [(n, l) for n, l in self.steps if isinstance(l, BatchNormLayer)]

    def convert_to_bsn(self):
        """Replace every BN with a frozen power-of-two shift.

        Negative per-channel scales cannot survive a layer-shared positive
        shift, so their signs are folded into the preceding weighted layer's
        latent weights (the level quantizer is odd, making the fold exact on
        the quantized function too).
        """
        preceding = None
        for _, layer in self.steps:
            if hasattr(layer, "quantized_weights"):
                preceding = layer
                continue
            if isinstance(layer, BatchNormLayer) and layer.bsn is None:
                gh = gamma_hat(layer.state)[0]
                sgn = np.where(gh >= 0, 1.0, -1.0)
                if preceding is not None and np.any(sgn < 0):
                    w = preceding.w.data
                    if isinstance(preceding, QuantDense):
                        w *= sgn  # output axis is last
                    else:
                        w *= sgn.reshape((-1,) + (1,) * (w.ndim - 1))
                    if getattr(preceding, "b", None) is not None:
                        preceding.b.data *= sgn
                layer.bsn = fold_to_bsn(layer.state)
        self.recalibrate()


def build_nqe(cfg: ModelConfig) -> Net:
    rng = np.random.default_rng(cfg.seed)
    table = {r.name: r for r in nqe_layer_table(cfg)}
    steps: list[tuple[str, object]] = []

    def conv_module(name: str, pool: bool):
        r = table[name]
        # 2-bit inputs are the hwmsb alphabet {0,1/3,2/3,1}: the conv defers
        # the /3 so the accumulation stays dyadic.
        steps.append((name, QuantConv2d(r.in_ch, r.out_ch, r.kernel, r.weight_levels,
                                        rng, bias=(name == "conv1"),
                                        thirds_input=(r.input_precision == 2))))
        steps.append((f"{name}_bn", BatchNormLayer(r.out_ch)))
        steps.append((f"{name}_act", ActivationLayer(r.activation)))
        if pool:
            steps.append((f"{name}_pool", MaxPool2Layer()))

    conv_module("conv1", pool=False)
    conv_module("conv2", pool=True)
    conv_module("conv3", pool=False)
    conv_module("conv4", pool=True)
    conv_module("conv5", pool=False)

    r = table["gc"]
    steps.append(("gc", GroupConv2d(r.in_ch, r.out_ch, r.kernel, cfg.G, r.weight_levels, rng)))
    steps.append(("gc_bn", BatchNormLayer(r.out_ch)))
    steps.append(("gc_pool", MaxPool2Layer()))
    steps.append(("gc_act", ActivationLayer("heaviside")))

    steps.extend(build_bottleneck(cfg.bottleneck_kind, cfg.F, rng=rng,
                                  trunk_hw=cfg.trunk_hw, seed=cfg.seed + 1000003))
    steps.append(("code", ActivationLayer("heaviside")))

    rc = table["classifier"]
    steps.append(("classifier", QuantDense(rc.in_ch, rc.out_ch, rc.weight_levels, rng)))
    steps.append(("classifier_bn", BatchNormLayer(rc.out_ch)))
    return Net(cfg, steps, code_step="code")


def build_bottleneck(kind: str, F: int, rng=None, trunk_hw: int = 4, seed: int = 0):
    """Bottleneck steps: trunk bits (N, 4F, t, t) in, 4F pre-code units out.

    The depthwise kernel spans the whole trunk map, so no activation sits
    between it and the mixing dense layer; the Rademacher projection gets no
    normalization of its own.
    """
    if kind not in BOTTLENECK_KINDS:
        raise ValueError(f"unknown bottleneck kind {kind!r}")
    rng = np.random.default_rng(seed) if rng is None else rng
    flat = 4 * F * trunk_hw * trunk_hw
    if kind == "lfc":
        return [
            ("flatten", Flatten()),
            ("lfc", QuantDense(flat, 4 * F, 2, rng)),
            ("lfc_bn", BatchNormLayer(4 * F)),
        ]
    if kind == "rcs_fc":
        return [
            ("flatten", Flatten()),
            ("rcs", RcsDense(flat, 4 * F, seed=seed)),
            ("fc", QuantDense(4 * F, 4 * F, 2, rng)),
            ("fc_bn", BatchNormLayer(4 * F)),
        ]
    return [
        ("dw", DepthwiseConv2d(4 * F, trunk_hw, 2, rng)),
        ("dw_bn", BatchNormLayer(4 * F)),
        ("flatten", Flatten()),
        ("fc", QuantDense(4 * F, 4 * F, 2, rng)),
        ("fc_bn", BatchNormLayer(4 * F)),
    ]


# ---- decoder ----------------------------------------------------------------


class Cbr:
    """Convolution + BN + ReLU, real-valued (decoder side)."""

    def __init__(self, in_ch: int, out_ch: int, rng, kernel: int = 3, stride: int = 1):
        fan_in = in_ch * kernel * kernel
        self.w = Tensor(_uniform_init(rng, (out_ch, in_ch, kernel, kernel), fan_in),
                        requires_grad=True)
        self.bn = BatchNormLayer(out_ch)
        self.stride, self.padding = stride, kernel // 2

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        y = T.conv2d(x, self.w, stride=self.stride, padding=self.padding)
        return self.bn.forward(y, mode).relu()

    def params(self):
        return [self.w] + self.bn.params()


class ConvTCbr:
    """Stride-2 transpose convolution + BN + ReLU: doubles H and W."""

    def __init__(self, in_ch: int, out_ch: int, rng, kernel: int = 3):
        fan_in = in_ch * kernel * kernel
        self.w = Tensor(_uniform_init(rng, (in_ch, out_ch, kernel, kernel), fan_in),
                        requires_grad=True)
        self.bn = BatchNormLayer(out_ch)

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        y = T.conv_transpose2d(x, self.w, stride=2, padding=1, output_padding=1)
        return self.bn.forward(y, mode).relu()

    def params(self):
        return [self.w] + self.bn.params()


class RcBlock:
    """Residual-concatenation block: the second conv sees the input alongside
    the first conv's features, and the input is added back at the end."""

    def __init__(self, channels: int, rng):
        self.cbr1 = Cbr(channels, channels, rng)
        self.cbr2 = Cbr(2 * channels, channels, rng)

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        h1 = self.cbr1.forward(x, mode)
        h2 = self.cbr2.forward(T.concat([x, h1], axis=1), mode)
        return h2 + x

    def params(self):
        return self.cbr1.params() + self.cbr2.params()


class PatchUpsampler:
    """Code vector to a half-patch feature map: 1x1 seeded transpose-conv
    pyramid, one doubling per stage."""

    def __init__(self, code_units: int, channels: tuple[int, ...], rng):
        self.code_units = code_units
        self.stages = []
        c = code_units
        for out in channels:
            self.stages.append(ConvTCbr(c, out, rng))
            c = out

    def forward(self, codes: Tensor, mode: str = "train") -> Tensor:
        x = codes.reshape(codes.shape[0], self.code_units, 1, 1)
        for stage in self.stages:
            x = stage.forward(x, mode)
        return x

    def params(self):
        return [p for s in self.stages for p in s.params()]


class Refinement:
    """Shared full-image (or per-patch) stage: RC blocks, a x2 upsampling,
    one more RC block, then a two-branch gate (plain CBR times a
    softmax-across-channels CBR) and the RGB projection."""

    def __init__(self, n: int, rc_blocks: int, rng):
        self.blocks = [RcBlock(n, rng) for _ in range(rc_blocks)]
        self.up = ConvTCbr(n, n, rng)
        self.post = RcBlock(n, rng)
        self.gate_feat = Cbr(n, n, rng, kernel=1)
        self.gate_attn_w = Tensor(_uniform_init(rng, (n, n, 1, 1), n), requires_grad=True)
        self.gate_attn_bn = BatchNormLayer(n)
        self.rgb_w = Tensor(_uniform_init(rng, (3, n, 1, 1), n), requires_grad=True)

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        for b in self.blocks:
            x = b.forward(x, mode)
        x = self.up.forward(x, mode)
        x = self.post.forward(x, mode)
        feat = self.gate_feat.forward(x, mode)
        attn = self.gate_attn_bn.forward(T.conv2d(x, self.gate_attn_w), mode)
        gated = feat * T.softmax(attn, axis=1)
        return T.conv2d(gated, self.rgb_w)

    def params(self):
        out = [p for b in self.blocks for p in b.params()]
        out += self.up.params() + self.post.params() + self.gate_feat.params()
        out += [self.gate_attn_w] + self.gate_attn_bn.params() + [self.rgb_w]
        return out


class Purenet:
    """Patch decoder. ``purenet`` aggregates per-patch features into a mosaic
    before refinement; ``pi_purenet`` refines each patch independently;
    ``bbd`` replaces refinement with one stride-2 CBR and an RGB projection.
    """

    def __init__(self, dcfg: PurenetConfig, code_units: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = dcfg
        self.code_units = code_units
        self.pu = PatchUpsampler(code_units, dcfg.pu_channels, rng)
        if dcfg.variant == "bbd":
            self.tail_up = ConvTCbr(dcfg.n_feature, dcfg.n_feature, rng)
            self.tail_rgb = Tensor(
                _uniform_init(rng, (3, dcfg.n_feature, 1, 1), dcfg.n_feature),
                requires_grad=True,
            )
            self.refine = None
        else:
            self.refine = Refinement(dcfg.n_feature, dcfg.rc_blocks, rng)

    def forward(self, codes: Tensor, rows: int, cols: int, mode: str = "train") -> Tensor:
        """codes: (N*rows*cols, 4F) patch codes in row-major image order.
        Returns (N, 3, rows*patch, cols*patch)."""
        feats = self.pu.forward(codes, mode)
        half = self.cfg.patch // 2
        if self.cfg.variant == "purenet":
            mosaic = _to_grid(feats, rows, cols, half)
            return self.refine.forward(mosaic, mode)
        if self.cfg.variant == "pi_purenet":
            out = self.refine.forward(feats, mode)
            return _to_grid(out, rows, cols, self.cfg.patch)
        out = self.tail_up.forward(feats, mode)
        out = T.conv2d(out, self.tail_rgb)
        return _to_grid(out, rows, cols, self.cfg.patch)

    def params(self):
        out = self.pu.params()
        if self.refine is not None:
            out += self.refine.params()
        else:
            out += self.tail_up.params() + [self.tail_rgb]
        return out

    def as_variant(self, variant: str) -> "Purenet":
        """The same weights routed as another variant: the per-patch decoder's
        upsampler and refinement carry over to the aggregating one."""
        if variant == self.cfg.variant:
            return self
        if self.refine is None or variant == "bbd":
            raise ValueError("bbd does not share a refinement stage")
        clone = object.__new__(Purenet)
        clone.cfg = replace(self.cfg, variant=variant)
        clone.code_units = self.code_units
        clone.pu = self.pu
        clone.refine = self.refine
        return clone


def _to_grid(patches: Tensor, rows: int, cols: int, hw: int) -> Tensor:
    """(N*rows*cols, C, hw, hw) -> (N, C, rows*hw, cols*hw), row-major."""
    c = patches.shape[1]
    n = patches.shape[0] // (rows * cols)
    y = patches.reshape(n, rows, cols, c, hw, hw)
    y = y.transpose(0, 3, 1, 4, 2, 5)
    return y.reshape(n, c, rows * hw, cols * hw)


def build_purenet(dcfg: PurenetConfig, code_units: int, seed: int = 0) -> Purenet:
    return Purenet(dcfg, code_units, seed=seed)
