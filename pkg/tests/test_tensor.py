"""Autodiff engine tests.

Every operation is checked against centered finite differences; the two
convolutions additionally get dense loop-nest reference forwards.
"""

import numpy as np
import pytest

from nqe import tensor as T
from nqe.activations import hwmsb, hwmsb_value
from nqe.quantizers import QuantizerSpec, heaviside, linear_symmetric_quantize, sign_binarize
from nqe.tensor import Tensor, gradcheck, surrogate_mode

RNG = np.random.default_rng(1003)


def check(f, params, tol=1e-6):
    assert gradcheck(f, params) < tol


def conv2d_reference(x, w, b=None, stride=1, padding=0):
    n, c, h, ww = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding,) * 2, (padding,) * 2))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (ww + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, oh, ow))
    for ni in range(n):
        for fi in range(f):
            for p in range(oh):
                for q in range(ow):
                    patch = xp[ni, :, p * stride : p * stride + kh, q * stride : q * stride + kw]
                    out[ni, fi, p, q] = np.sum(patch * w[fi])
                    if b is not None:
                        out[ni, fi, p, q] += b[fi]
    return out


def convt_reference(x, w, stride, padding, output_padding):
    n, c, h, ww = x.shape
    _, f, kh, kw = w.shape
    oh = (h - 1) * stride - 2 * padding + kh + output_padding
    ow = (ww - 1) * stride - 2 * padding + kw + output_padding
    full = np.zeros((n, f, (h - 1) * stride + kh, (ww - 1) * stride + kw))
    for ni in range(n):
        for ci in range(c):
            for fi in range(f):
                for p in range(h):
                    for q in range(ww):
                        for ki in range(kh):
                            for kj in range(kw):
                                full[ni, fi, p * stride + ki, q * stride + kj] += (
                                    x[ni, ci, p, q] * w[ci, fi, ki, kj]
                                )
    return full[:, :, padding : padding + oh, padding : padding + ow]


class TestArithmetic:
    def test_add_mul_div(self):
        a = Tensor(RNG.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(RNG.normal(size=(3, 4)) + 3.0, requires_grad=True)
        check(lambda: ((a * b + a) / b + 2.0 * a - 0.5).sum(), [a, b])

    def test_broadcast_bias(self):
        a = Tensor(RNG.normal(size=(2, 3, 4)), requires_grad=True)
        b = Tensor(RNG.normal(size=(1, 3, 1)), requires_grad=True)
        check(lambda: ((a + b) * b).sum(), [a, b])

    def test_pow_sqrt(self):
        a = Tensor(RNG.uniform(0.5, 2.0, size=(5,)), requires_grad=True)
        check(lambda: (a**2).sum() + a.sqrt().sum(), [a])

    def test_matmul(self):
        a = Tensor(RNG.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(RNG.normal(size=(4, 2)), requires_grad=True)
        check(lambda: (a @ b).sum(), [a, b])

    def test_reuse_accumulates(self):
        x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
        y = (x * x + x).sum()
        y.backward()
        np.testing.assert_allclose(x.grad, 2 * x.data + 1)

    def test_backward_needs_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            (x * 2).backward()


class TestShapes:
    def test_reshape_transpose(self):
        a = Tensor(RNG.normal(size=(2, 3, 4)), requires_grad=True)
        w = Tensor(RNG.normal(size=(2, 3, 4)), requires_grad=True)
        check(lambda: (a.transpose(2, 0, 1).reshape(4, 6) * w.reshape(4, 6)).sum(), [a, w])

    def test_concat(self):
        a = Tensor(RNG.normal(size=(2, 3, 2, 2)), requires_grad=True)
        b = Tensor(RNG.normal(size=(2, 5, 2, 2)), requires_grad=True)
        check(lambda: (T.concat([a, b], axis=1) ** 2).sum(), [a, b])

    def test_reductions(self):
        a = Tensor(RNG.normal(size=(3, 4, 5)), requires_grad=True)
        check(lambda: a.mean(axis=(0, 2)).sum() + a.sum(axis=1, keepdims=True).mean(), [a])


class TestNonlinearities:
    def test_relu(self):
        data = RNG.normal(size=(4, 4))
        data[np.abs(data) < 0.05] += 0.1
        a = Tensor(data, requires_grad=True)
        check(lambda: (a.relu() * a).sum(), [a])

    def test_softmax_forward(self):
        x = Tensor(RNG.normal(size=(2, 5, 3)))
        s = T.softmax(x, axis=1)
        np.testing.assert_allclose(s.data.sum(axis=1), 1.0)
        assert np.all(s.data > 0)

    def test_softmax_grad(self):
        x = Tensor(RNG.normal(size=(2, 4)), requires_grad=True)
        c = Tensor(RNG.normal(size=(2, 4)))
        check(lambda: (T.softmax(x, axis=1) * c).sum(), [x])


class TestConv2d:
    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_forward_matches_reference(self, stride, padding):
        x = RNG.normal(size=(2, 3, 6, 6))
        w = RNG.normal(size=(4, 3, 3, 3))
        b = RNG.normal(size=4)
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
        np.testing.assert_allclose(
            out.data, conv2d_reference(x, w, b, stride, padding), atol=1e-12
        )

    def test_grad(self):
        x = Tensor(RNG.normal(size=(2, 3, 5, 5)), requires_grad=True)
        w = Tensor(RNG.normal(size=(2, 3, 3, 3)), requires_grad=True)
        b = Tensor(RNG.normal(size=2), requires_grad=True)
        check(lambda: (T.conv2d(x, w, b, padding=1) ** 2).mean(), [x, w, b])

    def test_strided_grad(self):
        x = Tensor(RNG.normal(size=(1, 2, 6, 6)), requires_grad=True)
        w = Tensor(RNG.normal(size=(3, 2, 3, 3)), requires_grad=True)
        check(lambda: (T.conv2d(x, w, stride=2, padding=1) ** 2).sum(), [x, w])

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            T.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 4, 3, 3))))


class TestConvTranspose2d:
    def test_forward_matches_reference(self):
        x = RNG.normal(size=(2, 3, 4, 4))
        w = RNG.normal(size=(3, 5, 3, 3))
        out = T.conv_transpose2d(Tensor(x), Tensor(w))
        assert out.shape == (2, 5, 8, 8)
        np.testing.assert_allclose(out.data, convt_reference(x, w, 2, 1, 1), atol=1e-12)

    def test_doubles_spatial_size(self):
        for h in (1, 2, 4, 8):
            x = Tensor(np.zeros((1, 2, h, h)))
            w = Tensor(np.zeros((2, 2, 3, 3)))
            assert T.conv_transpose2d(x, w).shape == (1, 2, 2 * h, 2 * h)

    def test_grad(self):
        x = Tensor(RNG.normal(size=(2, 2, 3, 3)), requires_grad=True)
        w = Tensor(RNG.normal(size=(2, 3, 3, 3)), requires_grad=True)
        check(lambda: (T.conv_transpose2d(x, w) ** 2).mean(), [x, w])


class TestDepthwise:
    def test_forward(self):
        x = RNG.normal(size=(2, 3, 4, 4))
        w = RNG.normal(size=(3, 4, 4))
        out = T.depthwise_conv2d(Tensor(x), Tensor(w))
        assert out.shape == (2, 3, 1, 1)
        want = (x * w[None]).sum(axis=(2, 3))[..., None, None]
        np.testing.assert_allclose(out.data, want, atol=1e-12)

    def test_grad(self):
        x = Tensor(RNG.normal(size=(2, 3, 5, 5)), requires_grad=True)
        w = Tensor(RNG.normal(size=(3, 3, 3)), requires_grad=True)
        check(lambda: (T.depthwise_conv2d(x, w) ** 2).sum(), [x, w])


class TestMaxPool:
    def test_forward(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        out = T.maxpool2(Tensor(x))
        np.testing.assert_array_equal(out.data[0, 0], [[5, 7], [13, 15]])

    def test_grad(self):
        x = Tensor(RNG.normal(size=(2, 3, 4, 4)), requires_grad=True)
        check(lambda: (T.maxpool2(x) ** 2).sum(), [x])

    def test_odd_size_rejected(self):
        with pytest.raises(ValueError):
            T.maxpool2(Tensor(np.zeros((1, 1, 3, 4))))


class TestQuantizerBridges:
    def test_hard_forwards(self):
        x = RNG.normal(size=(4, 4))
        spec = QuantizerSpec(5, 0.4, 1.0)
        np.testing.assert_array_equal(
            T.quantize_weights(Tensor(x), spec).data, linear_symmetric_quantize(x, spec)
        )
        np.testing.assert_array_equal(T.sign_act(Tensor(x)).data, sign_binarize(x))
        np.testing.assert_array_equal(T.heaviside_act(Tensor(x)).data, heaviside(x))
        np.testing.assert_array_equal(
            T.hwmsb_act(Tensor(x)).data, hwmsb_value(hwmsb(x))
        )

    def test_surrogates_are_clip(self):
        x = Tensor(np.array([-2.0, -0.5, 0.3, 2.0]))
        with surrogate_mode():
            np.testing.assert_allclose(T.sign_act(x).data, [-1, -0.5, 0.3, 1])
            np.testing.assert_allclose(T.heaviside_act(x).data, [-1, -0.5, 0.3, 1])

    def test_hwmsb_surrogate_continuity(self):
        # value-continuous across all three joints
        with surrogate_mode():
            for edge in (-0.125, 0.125, 1.0):
                lo = T.hwmsb_act(Tensor(np.array(edge - 1e-9))).item()
                hi = T.hwmsb_act(Tensor(np.array(edge + 1e-9))).item()
                assert abs(hi - lo) < 1e-8

    def test_quantizer_grads(self):
        # sample away from the surrogate kinks so finite differences are clean
        data = np.array([-0.95, -0.6, -0.3, -0.05, 0.05, 0.3, 0.6, 0.95])
        spec = QuantizerSpec(3, 0.4, 1.0)
        with surrogate_mode():
            for op in (
                lambda t: T.quantize_weights(t, spec),
                T.sign_act,
                T.heaviside_act,
                T.hwmsb_act,
            ):
                x = Tensor(data.copy(), requires_grad=True)
                c = Tensor(RNG.normal(size=data.shape))
                assert gradcheck(lambda: (op(x) * c).sum(), [x]) < 1e-6


class TestEndToEnd:
    def test_three_layer_toy_net(self):
        # conv -> hwmsb -> pool -> dense -> sign -> dense, squared-hinge loss
        x = Tensor(RNG.uniform(-1, 1, size=(2, 2, 4, 4)))
        y = Tensor(np.array([[1.0, -1.0], [-1.0, 1.0]]))
        w1 = Tensor(RNG.normal(size=(3, 2, 3, 3)) * 0.5, requires_grad=True)
        b1 = Tensor(RNG.normal(size=3) * 0.1, requires_grad=True)
        w2 = Tensor(RNG.normal(size=(12, 4)) * 0.5, requires_grad=True)
        w3 = Tensor(RNG.normal(size=(4, 2)) * 0.5, requires_grad=True)
        spec = QuantizerSpec(5, 0.4, 1.0)

        def loss():
            h = T.conv2d(x, T.quantize_weights(w1, spec), b1, padding=1)
            h = T.maxpool2(T.hwmsb_act(h))
            h = h.reshape(2, 12) @ w2
            h = T.sign_act(h) @ w3
            return ((1.0 - y * h).relu() ** 2).mean()

        with surrogate_mode():
            assert gradcheck(loss, [w1, b1, w2, w3]) < 1e-4
