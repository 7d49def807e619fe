# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False
"""Compiled convolution and pooling kernels.

Convolutions run as compiled im2col/col2im plus a direct BLAS GEMM
call, so patch extraction and the matrix product both bypass the
interpreter.  Pooling is typed direct loops.  float32 and float64 via
a fused type; single-threaded and deterministic.  The python-level
wrappers validate shapes and allocate outputs, mirroring numpy_ops.
"""

from libc.string cimport memcpy, memset

import numpy as np

cimport cython
from scipy.linalg.cython_blas cimport dgemm, sgemm


ctypedef fused real:
    float
    double


def _out_size(Py_ssize_t size, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    out = (size + 2 * pad - k) // stride + 1
    if out < 1:
        raise ValueError(f"kernel {k} with stride {stride}, pad {pad} does not fit input of size {size}")
    return out


cdef inline Py_ssize_t _lo(Py_ssize_t pad, Py_ssize_t tap, Py_ssize_t stride) noexcept nogil:
    # smallest out index with out*stride + tap - pad >= 0
    cdef Py_ssize_t a = pad - tap
    if a <= 0:
        return 0
    return (a + stride - 1) // stride


cdef inline Py_ssize_t _hi(Py_ssize_t limit, Py_ssize_t pad, Py_ssize_t tap,
                           Py_ssize_t stride, Py_ssize_t out_limit) noexcept nogil:
    # largest out index with out*stride + tap - pad <= limit - 1
    cdef Py_ssize_t v = (limit - 1 + pad - tap) // stride
    if v > out_limit - 1:
        return out_limit - 1
    return v


cdef void _im2col_one(const real* x, real* cols, Py_ssize_t C, Py_ssize_t H, Py_ssize_t W,
                      Py_ssize_t KH, Py_ssize_t KW, Py_ssize_t stride, Py_ssize_t pad,
                      Py_ssize_t Ho, Py_ssize_t Wo) noexcept nogil:
    """Fill cols (row-major [C*KH*KW, Ho*Wo]) from one padded image."""
    cdef Py_ssize_t L = Ho * Wo
    cdef Py_ssize_t ci, i, j, ho, wo, hin, row_off, base
    cdef Py_ssize_t ho_lo, ho_hi, wo_lo, wo_hi
    cdef const real* src
    cdef real* dst
    memset(cols, 0, C * KH * KW * L * sizeof(real))
    for ci in range(C):
        for i in range(KH):
            ho_lo = _lo(pad, i, stride)
            ho_hi = _hi(H, pad, i, stride, Ho)
            for j in range(KW):
                wo_lo = _lo(pad, j, stride)
                wo_hi = _hi(W, pad, j, stride, Wo)
                base = j - pad
                row_off = ((ci * KH + i) * KW + j) * L
                for ho in range(ho_lo, ho_hi + 1):
                    hin = ho * stride + i - pad
                    src = x + (ci * H + hin) * W
                    dst = cols + row_off + ho * Wo
                    if stride == 1:
                        memcpy(dst + wo_lo, src + wo_lo + base, (wo_hi - wo_lo + 1) * sizeof(real))
                    else:
                        for wo in range(wo_lo, wo_hi + 1):
                            dst[wo] = src[wo * stride + base]


cdef void _col2im_one(const real* cols, real* gx, Py_ssize_t C, Py_ssize_t H, Py_ssize_t W,
                      Py_ssize_t KH, Py_ssize_t KW, Py_ssize_t stride, Py_ssize_t pad,
                      Py_ssize_t Ho, Py_ssize_t Wo) noexcept nogil:
    """Scatter-add cols back into one image-gradient buffer."""
    cdef Py_ssize_t L = Ho * Wo
    cdef Py_ssize_t ci, i, j, ho, wo, hin, row_off, base
    cdef Py_ssize_t ho_lo, ho_hi, wo_lo, wo_hi
    cdef const real* src
    cdef real* dst
    for ci in range(C):
        for i in range(KH):
            ho_lo = _lo(pad, i, stride)
            ho_hi = _hi(H, pad, i, stride, Ho)
            for j in range(KW):
                wo_lo = _lo(pad, j, stride)
                wo_hi = _hi(W, pad, j, stride, Wo)
                base = j - pad
                row_off = ((ci * KH + i) * KW + j) * L
                for ho in range(ho_lo, ho_hi + 1):
                    hin = ho * stride + i - pad
                    dst = gx + (ci * H + hin) * W
                    src = cols + row_off + ho * Wo
                    for wo in range(wo_lo, wo_hi + 1):
                        dst[wo * stride + base] = dst[wo * stride + base] + src[wo]


cdef void _gemm_rowmajor(bint ta, bint tb, Py_ssize_t m, Py_ssize_t n, Py_ssize_t k,
                         const real* a, const real* b, real beta, real* c) noexcept nogil:
    """C (m x n, row-major) = op(A) @ op(B) + beta*C.

    Row-major matrices are handed to column-major BLAS as their
    transposes: compute C^T = op(B)^T @ op(A)^T instead.
    """
    cdef int mm = <int> n, nn = <int> m, kk = <int> k
    cdef int lda_b, lda_a
    cdef real one = 1
    cdef char ctb = b'T' if tb else b'N'
    cdef char cta = b'T' if ta else b'N'
    # leading dims of the stored (col-major transposed) buffers
    lda_b = <int> (k if tb else n)
    lda_a = <int> (m if ta else k)
    if real is float:
        sgemm(&ctb, &cta, &mm, &nn, &kk, &one, <float*> b, &lda_b,
              <float*> a, &lda_a, &beta, <float*> c, &mm)
    else:
        dgemm(&ctb, &cta, &mm, &nn, &kk, &one, <double*> b, &lda_b,
              <double*> a, &lda_a, &beta, <double*> c, &mm)


def _conv2d_forward_impl(const real[:, :, :, ::1] x, const real[:, :, :, ::1] w,
                         real[:, :, :, ::1] y, real[:, ::1] cols,
                         Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Co = w.shape[0], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t Ho = y.shape[2], Wo = y.shape[3]
    cdef Py_ssize_t L = Ho * Wo, K = C * KH * KW
    cdef Py_ssize_t b
    with nogil:
        for b in range(B):
            _im2col_one(&x[b, 0, 0, 0], &cols[0, 0], C, H, W, KH, KW, stride, pad, Ho, Wo)
            # y[b] (Co x L) = w (Co x K) @ cols (K x L)
            _gemm_rowmajor(False, False, Co, L, K, &w[0, 0, 0, 0], &cols[0, 0],
                           <real> 0, &y[b, 0, 0, 0])


def conv2d_forward(x, weight, stride, pad):
    x = np.ascontiguousarray(x)
    weight = np.ascontiguousarray(weight)
    b, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {ci}")
    ho = _out_size(h, kh, stride, pad)
    wo = _out_size(w, kw, stride, pad)
    y = np.empty((b, co, ho, wo), dtype=x.dtype)
    cols = np.empty((c * kh * kw, ho * wo), dtype=x.dtype)
    _conv2d_forward_impl(x, weight, y, cols, stride, pad)
    return y


def _conv2d_bwd_input_impl(const real[:, :, :, ::1] gy, const real[:, :, :, ::1] w,
                           real[:, :, :, ::1] gx, real[:, ::1] cols,
                           Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t B = gy.shape[0], Co = gy.shape[1], Ho = gy.shape[2], Wo = gy.shape[3]
    cdef Py_ssize_t C = gx.shape[1], H = gx.shape[2], W = gx.shape[3]
    cdef Py_ssize_t KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t L = Ho * Wo, K = C * KH * KW
    cdef Py_ssize_t b
    with nogil:
        for b in range(B):
            # cols (K x L) = w^T (K x Co) @ gy[b] (Co x L)
            _gemm_rowmajor(True, False, K, L, Co, &w[0, 0, 0, 0], &gy[b, 0, 0, 0],
                           <real> 0, &cols[0, 0])
            _col2im_one(&cols[0, 0], &gx[b, 0, 0, 0], C, H, W, KH, KW, stride, pad, Ho, Wo)


def conv2d_backward_input(grad_y, weight, x_shape, stride, pad):
    grad_y = np.ascontiguousarray(grad_y)
    weight = np.ascontiguousarray(weight)
    co, ci, kh, kw = weight.shape
    gx = np.zeros(tuple(x_shape), dtype=grad_y.dtype)
    cols = np.empty((ci * kh * kw, grad_y.shape[2] * grad_y.shape[3]), dtype=grad_y.dtype)
    _conv2d_bwd_input_impl(grad_y, weight, gx, cols, stride, pad)
    return gx


def _conv2d_bwd_weight_impl(const real[:, :, :, ::1] x, const real[:, :, :, ::1] gy,
                            real[:, :, :, ::1] gw, real[:, ::1] cols,
                            Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Co = gy.shape[1], Ho = gy.shape[2], Wo = gy.shape[3]
    cdef Py_ssize_t KH = gw.shape[2], KW = gw.shape[3]
    cdef Py_ssize_t L = Ho * Wo, K = C * KH * KW
    cdef Py_ssize_t b
    with nogil:
        for b in range(B):
            _im2col_one(&x[b, 0, 0, 0], &cols[0, 0], C, H, W, KH, KW, stride, pad, Ho, Wo)
            # gw (Co x K) += gy[b] (Co x L) @ cols^T (L x K)
            _gemm_rowmajor(False, True, Co, K, L, &gy[b, 0, 0, 0], &cols[0, 0],
                           <real> 1, &gw[0, 0, 0, 0])


def conv2d_backward_weight(x, grad_y, kh, kw, stride, pad):
    x = np.ascontiguousarray(x)
    grad_y = np.ascontiguousarray(grad_y)
    co = grad_y.shape[1]
    gw = np.zeros((co, x.shape[1], kh, kw), dtype=x.dtype)
    cols = np.empty((x.shape[1] * kh * kw, grad_y.shape[2] * grad_y.shape[3]), dtype=x.dtype)
    _conv2d_bwd_weight_impl(x, grad_y, gw, cols, stride, pad)
    return gw


def _maxpool_fwd_impl(real[:, :, :, ::1] x, real[:, :, :, ::1] y,
                      long long[:, :, :, ::1] idx, Py_ssize_t k, Py_ssize_t stride):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = y.shape[2], Wo = y.shape[3]
    cdef Py_ssize_t b, c, ho, wo, i, j, h, w
    cdef real best, v
    cdef Py_ssize_t besti
    with nogil:
        for b in range(B):
            for c in range(C):
                for ho in range(Ho):
                    for wo in range(Wo):
                        best = x[b, c, ho * stride, wo * stride]
                        besti = (ho * stride) * W + wo * stride
                        for i in range(k):
                            h = ho * stride + i
                            for j in range(k):
                                w = wo * stride + j
                                v = x[b, c, h, w]
                                if v > best:
                                    best = v
                                    besti = h * W + w
                        y[b, c, ho, wo] = best
                        idx[b, c, ho, wo] = besti


def maxpool2d_forward(x, k, stride):
    x = np.ascontiguousarray(x)
    b, c, h, w = x.shape
    ho = _out_size(h, k, stride, 0)
    wo = _out_size(w, k, stride, 0)
    y = np.empty((b, c, ho, wo), dtype=x.dtype)
    idx = np.empty((b, c, ho, wo), dtype=np.int64)
    _maxpool_fwd_impl(x, y, idx, k, stride)
    return y, idx


def _maxpool_bwd_impl(real[:, :, :, ::1] gy, long long[:, :, :, ::1] idx,
                      real[:, :, :, ::1] gx):
    cdef Py_ssize_t B = gy.shape[0], C = gy.shape[1], Ho = gy.shape[2], Wo = gy.shape[3]
    cdef Py_ssize_t W = gx.shape[3]
    cdef Py_ssize_t b, c, ho, wo, flat
    with nogil:
        for b in range(B):
            for c in range(C):
                for ho in range(Ho):
                    for wo in range(Wo):
                        flat = idx[b, c, ho, wo]
                        gx[b, c, flat // W, flat % W] = gx[b, c, flat // W, flat % W] + gy[b, c, ho, wo]


def maxpool2d_backward(grad_y, idx, h, w):
    grad_y = np.ascontiguousarray(grad_y)
    idx = np.ascontiguousarray(idx)
    gx = np.zeros((grad_y.shape[0], grad_y.shape[1], h, w), dtype=grad_y.dtype)
    _maxpool_bwd_impl(grad_y, idx, gx)
    return gx


def _avgpool_fwd_impl(real[:, :, :, ::1] x, real[:, :, :, ::1] y, Py_ssize_t k, Py_ssize_t stride):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t Ho = y.shape[2], Wo = y.shape[3]
    cdef Py_ssize_t b, c, ho, wo, i, j
    cdef real acc, inv
    inv = <real> (1.0 / (k * k))
    with nogil:
        for b in range(B):
            for c in range(C):
                for ho in range(Ho):
                    for wo in range(Wo):
                        acc = 0
                        for i in range(k):
                            for j in range(k):
                                acc = acc + x[b, c, ho * stride + i, wo * stride + j]
                        y[b, c, ho, wo] = acc * inv


def avgpool2d_forward(x, k, stride):
    x = np.ascontiguousarray(x)
    b, c, h, w = x.shape
    ho = _out_size(h, k, stride, 0)
    wo = _out_size(w, k, stride, 0)
    y = np.empty((b, c, ho, wo), dtype=x.dtype)
    _avgpool_fwd_impl(x, y, k, stride)
    return y


def _avgpool_bwd_impl(real[:, :, :, ::1] gy, real[:, :, :, ::1] gx, Py_ssize_t k, Py_ssize_t stride):
    cdef Py_ssize_t B = gy.shape[0], C = gy.shape[1], Ho = gy.shape[2], Wo = gy.shape[3]
    cdef Py_ssize_t b, c, ho, wo, i, j
    cdef real share, inv
    inv = <real> (1.0 / (k * k))
    with nogil:
        for b in range(B):
            for c in range(C):
                for ho in range(Ho):
                    for wo in range(Wo):
                        share = gy[b, c, ho, wo] * inv
                        for i in range(k):
                            for j in range(k):
                                gx[b, c, ho * stride + i, wo * stride + j] = (
                                    gx[b, c, ho * stride + i, wo * stride + j] + share)


def avgpool2d_backward(grad_y, x_shape, k, stride):
    grad_y = np.ascontiguousarray(grad_y)
    gx = np.zeros(tuple(x_shape), dtype=grad_y.dtype)
    _avgpool_bwd_impl(grad_y, gx, k, stride)
    return gx
