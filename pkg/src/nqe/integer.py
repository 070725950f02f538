"""Integer-only inference: lowering a shift-normalized model to small-integer
weight codes plus static exponent bookkeeping, and executing it without a
single real-valued operation.

Every intermediate tensor is an integer mantissa array; its real value is
mantissa * 2**exponent / 3**thirds with a per-step constant exponent and
thirds flag. Shift normalizations therefore never execute at runtime: before
a sign or Heaviside they are dropped (positive scales cannot change the
comparison), before an HWMSB they move into the reference position, and
anywhere else they are a static exponent bump.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .activations import ReferencePosition, hwmsb_integer
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
)
from .models import Net
from .quantizers import linear_symmetric_quantize, sign_binarize

_WEIGHTED = (QuantConv2d, GroupConv2d, DepthwiseConv2d, QuantDense, RcsDense)


@dataclass(frozen=True)
class IntStep:
    """One executable stage; arrays are integer codes, never reals."""

    name: str
    kind: str
    codes: np.ndarray | None = None
    bias: np.ndarray | None = None  # already shifted to the accumulator exponent
    stride: int = 1
    padding: int = 0
    groups: int = 1
    scale_exp: int = 0
    ref: ReferencePosition | None = None
    out_exp: int = 0
    thirds: int = 0
    width: int = 0  # declared accumulator bits (weighted steps only)
    bound: int = 0  # worst-case |accumulator| backing the width


@dataclass(frozen=True)
class IntegerModel:
    steps: tuple[IntStep, ...]
    code_step: str
    input_hw: int
    code_units: int
    num_classes: int
    logit_exp: int
    bsn_decisions: tuple[tuple[str, str, int], ...]  # (bsn name, decision, shift)

    def encode(self, images: np.ndarray) -> np.ndarray:
        """uint8 images -> (N, code_units) 0/1 bit array."""
        return int_forward(self, images).codes

    def forward(self, images: np.ndarray) -> np.ndarray:
        """uint8 images -> integer logits at exponent ``logit_exp``."""
        return int_forward(self, images).logits


@dataclass(frozen=True)
class IntResult:
    logits: np.ndarray
    logit_exp: int
    codes: np.ndarray
    trace: tuple = field(default=())


def _weight_codes(layer) -> tuple[np.ndarray, int]:
    """Integer weight codes and their power-of-two exponent."""
    if isinstance(layer, RcsDense):
        return np.rint(layer.matrix).astype(np.int64), 0
    if layer.n_levels == 2:
        return np.rint(sign_binarize(layer.w.data)).astype(np.int64), 0
    q = linear_symmetric_quantize(layer.w.data, layer.spec)
    if layer.n_levels == 5:
        return np.rint(2.0 * q).astype(np.int64), -1
    return np.rint(q).astype(np.int64), 0


def _width_for(bound: int) -> int:
    return int(np.ceil(np.log2(bound + 1))) + 1


def _fan_in(layer) -> int:
    if isinstance(layer, QuantConv2d):
        return layer.in_ch * layer.kernel * layer.kernel
    if isinstance(layer, GroupConv2d):
        return (layer.in_ch // layer.groups) * layer.kernel * layer.kernel
    if isinstance(layer, DepthwiseConv2d):
        return layer.kernel * layer.kernel
    if isinstance(layer, QuantDense):
        return layer.in_units
    return layer.in_units  # RcsDense


def _bsn_decision(steps, i) -> str:
    """Routing for the BSN at position i, by its consumer."""
    for _, nxt in steps[i + 1 :]:
        if isinstance(nxt, (MaxPool2Layer, Flatten)):
            continue
        if isinstance(nxt, ActivationLayer):
            if nxt.kind == "hwmsb":
                return "absorb"
            if nxt.kind in ("sign", "heaviside"):
                return "elide"
            continue  # "none" is transparent
        if isinstance(nxt, _WEIGHTED):
            return "keep"
        raise ValueError(f"no lowering rule for consumer {type(nxt).__name__}")
    return "elide"  # trailing normalization: argmax is scale-invariant


def lower(model: Net, absorb_shifts: bool = True) -> IntegerModel:
    """Lower a shift-normalized model to its integer-only form.

    Also rounds the first-layer bias to 16-bit fixed point at the input
    exponent and writes it back into ``model``, so the real-valued reference
    and the lowered path evaluate the identical dyadic bias from then on.
    """
    for name, layer in model.steps:
        if isinstance(layer, BatchNormLayer) and layer.bsn is None:
            raise ValueError(
                f"{name} still carries batch statistics; convert_to_bsn first"
            )

    int_steps: list[IntStep] = []
    decisions: list[tuple[str, str, int]] = []
    cur_exp, cur_thirds, cur_max = -8, 0, 255  # uint8 input: mantissa at 2^-8
    pending = 0  # absorbed shift waiting for the next hwmsb

    steps = list(model.steps)
    skip_act: str | None = None
    for i, (name, layer) in enumerate(steps):
        if isinstance(layer, _WEIGHTED):
            codes, w_exp = _weight_codes(layer)
            acc_exp = cur_exp + w_exp
            bound = _fan_in(layer) * int(np.max(np.abs(codes))) * cur_max
            bias = None
            if getattr(layer, "b", None) is not None:
                b16 = np.clip(np.rint(layer.b.data * 256.0), -32768, 32767)
                layer.b.data = b16 / 256.0  # shared dyadic bias, see docstring
                shift = -8 - acc_exp
                if shift < 0:
                    raise ValueError(f"{name}: bias finer than the accumulator")
                bias = b16.astype(np.int64) << shift
                bound += int(np.max(np.abs(bias)))
            kind = {
                QuantConv2d: "conv",
                GroupConv2d: "group_conv",
                DepthwiseConv2d: "depthwise",
                QuantDense: "dense",
                RcsDense: "dense",
            }[type(layer)]
            int_steps.append(IntStep(
                name, kind, codes=codes, bias=bias,
                stride=getattr(layer, "stride", 1),
                padding=getattr(layer, "padding", 0),
                groups=getattr(layer, "groups", 1),
                out_exp=acc_exp, thirds=cur_thirds,
                width=_width_for(bound), bound=bound,
            ))
            cur_exp, cur_max = acc_exp, bound
        elif isinstance(layer, BatchNormLayer):
            s = layer.bsn.shift_exp
            decision = _bsn_decision(steps, i)
            decisions.append((name, decision, s))
            if decision == "absorb":
                pending = s
            elif decision == "keep":
                cur_exp += s
                int_steps.append(IntStep(name, "exp_shift", scale_exp=s,
                                         out_exp=cur_exp, thirds=cur_thirds))
        elif isinstance(layer, ActivationLayer):
            if name == skip_act:
                skip_act = None
                continue
            if layer.kind == "hwmsb":
                if absorb_shifts:
                    ref, scale = ReferencePosition(4 + pending), cur_exp
                else:
                    ref, scale = ReferencePosition(4), cur_exp + pending
                int_steps.append(IntStep(name, "hwmsb", scale_exp=scale, ref=ref,
                                         out_exp=0, thirds=1))
                cur_exp, cur_thirds, cur_max, pending = 0, 1, 3, 0
            elif layer.kind in ("sign", "heaviside"):
                int_steps.append(IntStep(name, layer.kind, out_exp=0))
                cur_exp, cur_thirds, cur_max = 0, 0, 1
            # "none" drops out of the lowered program entirely
        elif isinstance(layer, MaxPool2Layer):
            nxt = steps[i + 1] if i + 1 < len(steps) else None
            if nxt is not None and isinstance(nxt[1], ActivationLayer) \
                    and nxt[1].kind == "heaviside":
                # pooling after thresholding is an OR over 1-bit values
                int_steps.append(IntStep(nxt[0], "heaviside", out_exp=0))
                int_steps.append(IntStep(name, "or_pool", out_exp=0))
                cur_exp, cur_thirds, cur_max = 0, 0, 1
                skip_act = nxt[0]
            else:
                int_steps.append(IntStep(name, "maxpool", out_exp=cur_exp,
                                         thirds=cur_thirds))
        elif isinstance(layer, Flatten):
            int_steps.append(IntStep(name, "flatten", out_exp=cur_exp,
                                     thirds=cur_thirds))
        else:
            raise ValueError(f"no lowering rule for {type(layer).__name__} ({name})")

    return IntegerModel(
        steps=tuple(int_steps),
        code_step=model.code_step,
        input_hw=model.config.input_hw,
        code_units=model.config.code_units,
        num_classes=model.config.num_classes,
        logit_exp=cur_exp,
        bsn_decisions=tuple(decisions),
    )


def _exact_matmul(a: np.ndarray, b: np.ndarray, bound: int) -> np.ndarray:
    # |every partial sum| <= bound, so below 2^53 float64 GEMM is exact and
    # BLAS-fast; above (unreachable for <=32-bit programs) stay in int64
    if 0 < bound < 2**53:
        return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.int64)
    return a @ b


def _int_conv(x: np.ndarray, w: np.ndarray, stride: int, padding: int,
              bound: int = 0) -> np.ndarray:
    from .tensor import _windows

    n, c, h, ww = x.shape
    f, _, kh, kw = w.shape
    p = padding
    oh = (h + 2 * p - kh) // stride + 1
    ow = (ww + 2 * p - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = _windows(xp, kh, kw, stride, oh, ow).reshape(n, c * kh * kw, oh * ow)
    return _exact_matmul(w.reshape(f, c * kh * kw), cols, bound).reshape(
        n, f, oh, ow)


def _int_pool(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))


def _run_step(st: IntStep, x: np.ndarray) -> np.ndarray:
    if st.kind == "conv":
        out = _int_conv(x, st.codes, st.stride, st.padding, st.bound)
        if st.bias is not None:
            out += st.bias.reshape(1, -1, 1, 1)
        return out
    if st.kind == "group_conv":
        g = st.groups
        ipg = x.shape[1] // g
        opg = st.codes.shape[0] // g
        parts = [
            _int_conv(x[:, k * ipg : (k + 1) * ipg],
                      st.codes[k * opg : (k + 1) * opg], 1, st.padding, st.bound)
            for k in range(g)
        ]
        y = np.concatenate(parts, axis=1)
        n, c = y.shape[:2]
        rest = y.shape[2:]
        return y.reshape(n, g, c // g, *rest).swapaxes(1, 2).reshape(n, c, *rest)
    if st.kind == "depthwise":
        from .tensor import _windows

        kh = st.codes.shape[1]
        n, c, h, w = x.shape
        oh, ow = h - kh + 1, w - kh + 1
        cols = _windows(x, kh, kh, 1, oh, ow)
        return np.einsum("ncijpq,cij->ncpq", cols, st.codes)
    if st.kind == "dense":
        return _exact_matmul(x, st.codes, st.bound)
    if st.kind == "hwmsb":
        return hwmsb_integer(x, st.scale_exp, st.ref).astype(np.int64)
    if st.kind == "sign":
        return np.where(x >= 0, 1, -1).astype(np.int64)
    if st.kind == "heaviside":
        return (x > 0).astype(np.int64)
    if st.kind in ("maxpool", "or_pool"):
        return _int_pool(x)
    if st.kind == "flatten":
        return x.reshape(x.shape[0], -1)
    if st.kind == "exp_shift":
        return x  # mantissas are untouched; only the static exponent moved
    raise ValueError(f"unknown step kind {st.kind!r}")


def int_forward(im: IntegerModel, images: np.ndarray, trace: bool = False) -> IntResult:
    """Run the lowered model on uint8 images; integer arithmetic only."""
    if images.dtype != np.uint8:
        raise ValueError(f"expected uint8 input, got {images.dtype}")
    if images.ndim != 4 or images.shape[2:] != (im.input_hw, im.input_hw):
        raise ValueError(
            f"expected (N, 3, {im.input_hw}, {im.input_hw}) input, got {images.shape}"
        )
    x = images.astype(np.int64)
    codes = None
    records = []
    for st in im.steps:
        x = _run_step(st, x)
        if not np.issubdtype(x.dtype, np.integer):
            raise RuntimeError(f"real-valued intermediate produced at {st.name}")
        if st.width and int(np.max(np.abs(x))) >= (1 << (st.width - 1)):
            raise RuntimeError(
                f"accumulator overflow in {st.name}: "
                f"|acc| reached {int(np.max(np.abs(x)))} at width {st.width}"
            )
        if st.name == im.code_step:
            codes = x.reshape(x.shape[0], -1).astype(np.uint8)
        if trace:
            records.append((st.name, st.out_exp, st.thirds, x.copy()))
    if codes is None:
        raise RuntimeError(f"code step {im.code_step!r} never executed")
    return IntResult(logits=x, logit_exp=im.logit_exp, codes=codes,
                     trace=tuple(records))


def report_widths(im: IntegerModel) -> list[dict]:
    """Accumulator and storage widths per executable step."""
    storage = {"hwmsb": 2, "sign": 1, "heaviside": 1}
    rows = []
    for st in im.steps:
        if st.kind in ("conv", "group_conv", "depthwise", "dense"):
            rows.append({"name": st.name, "kind": st.kind,
                         "acc_bits": st.width, "bound": st.bound})
        elif st.kind in storage:
            rows.append({"name": st.name, "kind": st.kind,
                         "out_bits": storage[st.kind]})
    return rows
