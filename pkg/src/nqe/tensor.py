"""Reverse-mode automatic differentiation over numpy arrays.

A small tape engine: every operation records a closure that scatters the
upstream gradient to its parents, and ``backward`` replays the tape in
reverse topological order. Layout is NCHW throughout.

Quantizer operations come in two flavors selected by ``surrogate_mode``: the
hard forward used for training and inference, and a continuous stand-in whose
exact derivative equals the op's straight-through backward rule, so the whole
graph can be validated against finite differences.
"""

from __future__ import annotations

import contextlib
from typing import Sequence

import numpy as np

from .activations import LN2, hwmsb, hwmsb_backward, hwmsb_value
from .quantizers import (
    QuantizerSpec,
    heaviside,
    linear_symmetric_quantize,
    sign_binarize,
    ste_backward,
)

_SURROGATE = False


@contextlib.contextmanager
def surrogate_mode():
    """Swap hard quantizer forwards for their continuous stand-ins."""
    global _SURROGATE
    saved = _SURROGATE
    _SURROGATE = True
    try:
        yield
    finally:
        _SURROGATE = saved


def in_surrogate_mode() -> bool:
    return _SURROGATE


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # construction helper for op results
    @classmethod
    def _result(cls, data, parents, backward):
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.item())

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() needs a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # ---- elementwise arithmetic -------------------------------------------

    @staticmethod
    def _coerce(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def __add__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))

        return Tensor._result(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def backward(g):
            a._accumulate(-g)

        return Tensor._result(-a.data, (a,), backward)

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return Tensor._result(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return Tensor._result(a.data / b.data, (a, b), backward)

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __pow__(self, n: int):
        if not isinstance(n, (int, float)):
            raise TypeError("only scalar exponents are supported")
        a = self

        def backward(g):
            a._accumulate(g * n * a.data ** (n - 1))

        return Tensor._result(a.data**n, (a,), backward)

    def __matmul__(self, other):
        other = self._coerce(other)
        a, b = self, other
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError("matmul supports 2-D operands")

        def backward(g):
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)

        return Tensor._result(a.data @ b.data, (a, b), backward)

    # ---- shape ops ---------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.shape

        def backward(g):
            a._accumulate(g.reshape(old))

        return Tensor._result(a.data.reshape(shape), (a,), backward)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        a = self
        inv = tuple(np.argsort(axes))

        def backward(g):
            a._accumulate(g.transpose(inv))

        return Tensor._result(a.data.transpose(axes), (a,), backward)

    # ---- reductions and simple nonlinearities ------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape).copy())

        return Tensor._result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[ax] for ax in axes]))
        return self.sum(axis=axis, keepdims=keepdims) / count

    def sqrt(self):
        a = self
        out_data = np.sqrt(a.data)

        def backward(g):
            a._accumulate(g * 0.5 / out_data)

        return Tensor._result(out_data, (a,), backward)

    def relu(self):
        a = self
        mask = a.data > 0

        def backward(g):
            a._accumulate(g * mask)

        return Tensor._result(a.data * mask, (a,), backward)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def slice_axis(x: Tensor, lo: int, hi: int, axis: int = 1) -> Tensor:
    """Contiguous slice [lo, hi) along one axis."""
    sl = (slice(None),) * axis + (slice(lo, hi),)

    def backward(g):
        full = np.zeros_like(x.data)
        full[sl] = g
        x._accumulate(full)

    return Tensor._result(x.data[sl], (x,), backward)


def slice_channels(x: Tensor, lo: int, hi: int) -> Tensor:
    return slice_axis(x, lo, hi, axis=1)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [Tensor._coerce(t) for t in tensors]
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                p._accumulate(g[tuple(sl)])

    return Tensor._result(
        np.concatenate([p.data for p in parts], axis=axis), parts, backward
    )


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        x._accumulate(out_data * (g - dot))

    return Tensor._result(out_data, (x,), backward)


# ---- convolutions ----------------------------------------------------------


def _windows(xp: np.ndarray, kh: int, kw: int, s: int, oh: int, ow: int):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + s * oh : s, j : j + s * ow : s]
    return cols


def _scatter_windows(dcols: np.ndarray, xp_shape, s: int):
    n, c, kh, kw, oh, ow = dcols.shape
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + s * oh : s, j : j + s * ow : s] += dcols[:, :, i, j]
    return dxp


def conv2d(
    x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """2-D convolution, NCHW input, OIHW weights."""
    n, c, h, ww = x.shape
    f, cw, kh, kw = w.shape
    if cw != c:
        raise ValueError(f"channel mismatch: input {c}, weight {cw}")
    s, p = stride, padding
    oh = (h + 2 * p - kh) // s + 1
    ow = (ww + 2 * p - kw) // s + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _windows(xp, kh, kw, s, oh, ow)
    cols2 = cols.reshape(n, c * kh * kw, oh * ow)
    w2 = w.data.reshape(f, c * kh * kw)
    out_data = (w2 @ cols2).reshape(n, f, oh, ow)

    def backward(g):
        g2 = g.reshape(n, f, oh * ow)
        if w.requires_grad:
            dw = np.einsum("nfl,nkl->fk", g2, cols2, optimize=True)
            w._accumulate(dw.reshape(w.shape))
        if x.requires_grad:
            dcols2 = w2.T @ g2
            dxp = _scatter_windows(
                dcols2.reshape(n, c, kh, kw, oh, ow), xp.shape, s
            )
            x._accumulate(dxp[:, :, p : p + h, p : p + ww] if p else dxp)

    out = Tensor._result(out_data, (x, w), backward)
    if b is not None:
        out = out + b.reshape(1, f, 1, 1)
    return out


def conv_transpose2d(
    x: Tensor,
    w: Tensor,
    stride: int = 2,
    padding: int = 1,
    output_padding: int = 1,
) -> Tensor:
    """Transposed 2-D convolution, weights laid out (C_in, C_out, kh, kw)."""
    n, c, h, ww = x.shape
    cw, f, kh, kw = w.shape
    if cw != c:
        raise ValueError(f"channel mismatch: input {c}, weight {cw}")
    s, p, op = stride, padding, output_padding
    if op > p:
        raise ValueError("output_padding must not exceed padding here")
    oh = (h - 1) * s - 2 * p + kh + op
    ow = (ww - 1) * s - 2 * p + kw + op
    lh, lw = (h - 1) * s + kh, (ww - 1) * s + kw
    xt = x.data.transpose(0, 2, 3, 1)
    full = np.zeros((n, f, lh, lw), dtype=np.float64)
    for ki in range(kh):
        for kj in range(kw):
            tmp = xt @ w.data[:, :, ki, kj]
            full[:, :, ki : ki + s * h : s, kj : kj + s * ww : s] += tmp.transpose(
                0, 3, 1, 2
            )
    out_data = full[:, :, p : p + oh, p : p + ow]

    def backward(g):
        g_full = np.zeros((n, f, lh, lw), dtype=np.float64)
        g_full[:, :, p : p + oh, p : p + ow] = g
        dx = np.zeros_like(x.data) if x.requires_grad else None
        dw = np.zeros_like(w.data) if w.requires_grad else None
        for ki in range(kh):
            for kj in range(kw):
                gsl = g_full[:, :, ki : ki + s * h : s, kj : kj + s * ww : s]
                if dw is not None:
                    dw[:, :, ki, kj] = np.tensordot(
                        x.data, gsl, axes=([0, 2, 3], [0, 2, 3])
                    )
                if dx is not None:
                    dx += np.tensordot(
                        gsl, w.data[:, :, ki, kj], axes=([1], [1])
                    ).transpose(0, 3, 1, 2)
        if dw is not None:
            w._accumulate(dw)
        if dx is not None:
            x._accumulate(dx)

    return Tensor._result(out_data, (x, w), backward)


def depthwise_conv2d(x: Tensor, w: Tensor) -> Tensor:
    """Per-channel convolution, weights (C, kh, kw), stride 1, no padding."""
    n, c, h, ww = x.shape
    cw, kh, kw = w.shape
    if cw != c:
        raise ValueError(f"channel mismatch: input {c}, weight {cw}")
    oh, ow = h - kh + 1, ww - kw + 1
    cols = _windows(x.data, kh, kw, 1, oh, ow)
    out_data = np.einsum("ncijpq,cij->ncpq", cols, w.data, optimize=True)

    def backward(g):
        if w.requires_grad:
            w._accumulate(np.einsum("ncijpq,ncpq->cij", cols, g, optimize=True))
        if x.requires_grad:
            dcols = np.einsum("ncpq,cij->ncijpq", g, w.data, optimize=True)
            x._accumulate(_scatter_windows(dcols, x.shape, 1))

    return Tensor._result(out_data, (x, w), backward)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; ties route the gradient to the first max."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    oh, ow = h // 2, w // 2
    xr = x.data.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5)
    xr = xr.reshape(n, c, oh, ow, 4)
    idx = xr.argmax(axis=-1)
    out_data = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gr = np.zeros((n, c, oh, ow, 4), dtype=np.float64)
        np.put_along_axis(gr, idx[..., None], g[..., None], axis=-1)
        gx = gr.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        x._accumulate(gx.reshape(n, c, h, w))

    return Tensor._result(out_data, (x,), backward)


# ---- quantizer bridges -----------------------------------------------------


def quantize_weights(w: Tensor, spec: QuantizerSpec) -> Tensor:
    """Fake-quantized weights with a clipped straight-through gradient."""
    if _SURROGATE:
        data = np.clip(w.data, -1.0, 1.0)
    else:
        data = linear_symmetric_quantize(w.data, spec)

    def backward(g):
        w._accumulate(ste_backward(w.data, g))

    return Tensor._result(data, (w,), backward)


def sign_act(x: Tensor) -> Tensor:
    """Binarization to {-1, +1}; surrogate forward is Clip(x, -1, 1)."""
    data = np.clip(x.data, -1.0, 1.0) if _SURROGATE else sign_binarize(x.data)

    def backward(g):
        x._accumulate(ste_backward(x.data, g))

    return Tensor._result(data, (x,), backward)


def heaviside_act(x: Tensor) -> Tensor:
    """Step to {0, 1}; shares the clipped straight-through gradient."""
    data = np.clip(x.data, -1.0, 1.0) if _SURROGATE else heaviside(x.data)

    def backward(g):
        x._accumulate(ste_backward(x.data, g))

    return Tensor._result(data, (x,), backward)


def _hwmsb_surrogate(x: np.ndarray) -> np.ndarray:
    """Antiderivative of the HWMSB backward rule: linear inside, logarithmic
    on [1/8, 1], clamped flat outside."""
    out = np.where(x <= -0.125, -1.0 / 3.0, 8.0 * x / 3.0)
    pos = x >= 0.125
    safe = np.where(pos, x, 1.0)
    out = np.where(pos, (4.0 + np.log2(safe)) / 3.0, out)
    return np.where(x > 1.0, 4.0 / 3.0, out)


def hwmsb_act(x: Tensor) -> Tensor:
    """Half-wave 2-bit activation on the real training path."""
    data = _hwmsb_surrogate(x.data) if _SURROGATE else hwmsb_value(hwmsb(x.data))

    def backward(g):
        x._accumulate(hwmsb_backward(x.data, g))

    return Tensor._result(data, (x,), backward)


# ---- finite-difference checking -------------------------------------------


def gradcheck(f, params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max mixed absolute/relative error between autodiff and centered finite
    differences of the scalar ``f()``. Run inside ``surrogate_mode`` when the
    graph contains quantizers."""
    for p in params:
        p.zero_grad()
    f().backward()
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            fp = f().item()
            flat[i] = saved - eps
            fm = f().item()
            flat[i] = saved
            fd = (fp - fm) / (2.0 * eps)
            err = abs(an.flat[i] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst
