"""Pure-numpy convolution and pooling kernels (im2col based).

Fallback backend used when the compiled extension is unavailable.  All
functions take and return contiguous NCHW float32/float64 arrays and are
deterministic for fixed inputs.
"""

import numpy as np


def _out_size(size: int, k: int, stride: int, pad: int) -> int:
    out = (size + 2 * pad - k) // stride + 1
    if out < 1:
        raise ValueError(f"kernel {k} with stride {stride}, pad {pad} does not fit input of size {size}")
    return out


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Return patches of shape [B, C*kh*kw, Ho*Wo]."""
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = _out_size(h, kh, stride, pad)
    wo = _out_size(w, kw, stride, pad)
    s0, s1, s2, s3 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, c, kh, kw, ho, wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    return np.ascontiguousarray(windows).reshape(b, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Scatter-add patch gradients [B, C, kh, kw, Ho, Wo] back to input shape."""
    b, c, h, w = shape
    ho, wo = cols.shape[4], cols.shape[5]
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad : pad + h, pad : pad + w]
    return np.ascontiguousarray(out)


def conv2d_forward(x: np.ndarray, weight: np.ndarray, stride: int, pad: int) -> np.ndarray:
    b, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {ci}")
    ho = _out_size(h, kh, stride, pad)
    wo = _out_size(w, kw, stride, pad)
    cols = _im2col(x, kh, kw, stride, pad)
    wmat = weight.reshape(co, ci * kh * kw)
    y = np.matmul(wmat[None], cols)
    return y.reshape(b, co, ho, wo)


def conv2d_backward_input(grad_y: np.ndarray, weight: np.ndarray, x_shape, stride: int, pad: int) -> np.ndarray:
    b = grad_y.shape[0]
    co, ci, kh, kw = weight.shape
    ho, wo = grad_y.shape[2], grad_y.shape[3]
    wmat = weight.reshape(co, ci * kh * kw)
    gy = grad_y.reshape(b, co, ho * wo)
    gcols = np.matmul(wmat.T[None], gy)
    gcols = gcols.reshape(b, ci, kh, kw, ho, wo)
    return _col2im(gcols, x_shape, kh, kw, stride, pad)


def conv2d_backward_weight(x: np.ndarray, grad_y: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    b, c, _, _ = x.shape
    co = grad_y.shape[1]
    ho, wo = grad_y.shape[2], grad_y.shape[3]
    cols = _im2col(x, kh, kw, stride, pad)
    gy = grad_y.reshape(b, co, ho * wo)
    gw = np.matmul(gy, cols.transpose(0, 2, 1)).sum(axis=0)
    return np.ascontiguousarray(gw.reshape(co, c, kh, kw))


def _pool_windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    b, c, h, w = x.shape
    ho = _out_size(h, k, stride, 0)
    wo = _out_size(w, k, stride, 0)
    s0, s1, s2, s3 = x.strides
    return np.lib.stride_tricks.as_strided(
        x,
        shape=(b, c, ho, wo, k, k),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3),
        writeable=False,
    )


def maxpool2d_forward(x: np.ndarray, k: int, stride: int):
    b, c, h, w = x.shape
    win = _pool_windows(x, k, stride).reshape(x.shape[0], x.shape[1], -1, k * k)
    flat_local = win.argmax(axis=3)
    y = np.take_along_axis(win, flat_local[..., None], axis=3)[..., 0]
    ho = _out_size(h, k, stride, 0)
    wo = _out_size(w, k, stride, 0)
    # convert window-local argmax to a flat index into the H*W input plane
    oh, ow = np.divmod(np.arange(ho * wo), wo)
    ih = oh * stride + flat_local // k
    iw = ow * stride + flat_local % k
    idx = (ih * w + iw).astype(np.int64)
    return np.ascontiguousarray(y.reshape(b, c, ho, wo)), idx.reshape(b, c, ho, wo)


def maxpool2d_backward(grad_y: np.ndarray, idx: np.ndarray, h: int, w: int) -> np.ndarray:
    b, c = grad_y.shape[0], grad_y.shape[1]
    gx = np.zeros((b, c, h * w), dtype=grad_y.dtype)
    flat_idx = idx.reshape(b, c, -1)
    np.add.at(gx, (np.arange(b)[:, None, None], np.arange(c)[None, :, None], flat_idx), grad_y.reshape(b, c, -1))
    return gx.reshape(b, c, h, w)


def avgpool2d_forward(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    win = _pool_windows(x, k, stride)
    return np.ascontiguousarray(win.mean(axis=(4, 5)))


def avgpool2d_backward(grad_y: np.ndarray, x_shape, k: int, stride: int) -> np.ndarray:
    b, c, h, w = x_shape
    ho, wo = grad_y.shape[2], grad_y.shape[3]
    gx = np.zeros((b, c, h, w), dtype=grad_y.dtype)
    share = grad_y / (k * k)
    for i in range(k):
        for j in range(k):
            gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += share
    return gx
