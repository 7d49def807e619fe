"""Kernel backends: numpy/cython agreement and a naive-loop oracle."""

import numpy as np
import pytest

from multiexit import backend


def naive_conv2d(x, w, stride, pad):
    b, c, h, ww = x.shape
    co, ci, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (ww + 2 * pad - kw) // stride + 1
    y = np.zeros((b, co, ho, wo), dtype=np.float64)
    for bi in range(b):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ch in range(ci):
                        for p in range(kh):
                            for q in range(kw):
                                hh = i * stride + p - pad
                                www = j * stride + q - pad
                                if 0 <= hh < h and 0 <= www < ww:
                                    acc += float(x[bi, ch, hh, www]) * float(w[o, ch, p, q])
                    y[bi, o, i, j] = acc
    return y


BACKENDS = ["numpy"]
try:
    backend.get_backend("cython")
    BACKENDS.append("cython")
except ImportError:
    pass


@pytest.mark.parametrize("name", BACKENDS)
@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1)])
def test_conv_forward_matches_naive_loops(name, stride, pad, rng):
    impl = backend.get_backend(name)
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    got = impl.conv2d_forward(x, w, stride, pad)
    want = naive_conv2d(x, w, stride, pad)
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled extension unavailable")
@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (2, 0)])
def test_backends_agree_forward_and_backward(stride, pad, rng):
    cy = backend.get_backend("cython")
    npb = backend.get_backend("numpy")
    x = rng.normal(size=(3, 4, 8, 8))
    w = rng.normal(size=(6, 4, 3, 3))
    ya = cy.conv2d_forward(x, w, stride, pad)
    yb = npb.conv2d_forward(x, w, stride, pad)
    np.testing.assert_allclose(ya, yb, rtol=1e-10, atol=1e-12)
    gy = rng.normal(size=ya.shape)
    np.testing.assert_allclose(
        cy.conv2d_backward_input(gy, w, x.shape, stride, pad),
        npb.conv2d_backward_input(gy, w, x.shape, stride, pad), rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(
        cy.conv2d_backward_weight(x, gy, 3, 3, stride, pad),
        npb.conv2d_backward_weight(x, gy, 3, 3, stride, pad), rtol=1e-10, atol=1e-12)


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled extension unavailable")
def test_backends_agree_pooling(rng):
    cy = backend.get_backend("cython")
    npb = backend.get_backend("numpy")
    x = rng.permutation(2 * 3 * 8 * 8).astype(np.float64).reshape(2, 3, 8, 8)
    for k, s in [(2, 2), (3, 1), (2, 1)]:
        ya, ia = cy.maxpool2d_forward(x, k, s)
        yb, ib = npb.maxpool2d_forward(x, k, s)
        np.testing.assert_array_equal(ya, yb)
        np.testing.assert_array_equal(ia, ib)
        gy = rng.normal(size=ya.shape)
        np.testing.assert_allclose(cy.maxpool2d_backward(gy, ia, 8, 8),
                                   npb.maxpool2d_backward(gy, ib, 8, 8), rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(cy.avgpool2d_forward(x, k, s),
                                   npb.avgpool2d_forward(x, k, s), rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(cy.avgpool2d_backward(gy, x.shape, k, s),
                                   npb.avgpool2d_backward(gy, x.shape, k, s), rtol=1e-12, atol=1e-12)


def test_selected_backend_exposed():
    assert backend.BACKEND in ("numpy", "cython")
    y = backend.conv2d_forward(np.ones((1, 1, 3, 3), dtype=np.float32),
                               np.ones((1, 1, 1, 1), dtype=np.float32), 1, 0)
    np.testing.assert_array_equal(y, np.ones((1, 1, 3, 3), dtype=np.float32))
