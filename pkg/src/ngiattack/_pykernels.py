"""Pure-numpy versions of the compiled kernels.

Accumulation order matches ``_ckernels`` element by element, so swapping
backends never changes a result bit.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def im2col(xp, kh, kw, stride):
    n, c, hp, wp = xp.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    s0, s1, s2, s3 = xp.strides
    view = as_strided(
        xp,
        shape=(n, oh, ow, c, kh, kw),
        strides=(s0, s2 * stride, s3 * stride, s1, s2, s3),
        writeable=False,
    )
    return np.ascontiguousarray(view)


def col2im(cols, hp, wp, stride):
    n, oh, ow, c, kh, kw = cols.shape
    dx = np.zeros((n, c, hp, wp))
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return dx


def _windows(x, k):
    n, c, h, w = x.shape
    oh, ow = h // k, w // k
    x = x[:, :, : oh * k, : ow * k]
    return x.reshape(n, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, k * k)


def maxpool_forward(x, k):
    win = _windows(x, k)
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg.astype(np.int64)


def maxpool_backward(dout, arg, h, w, k):
    n, c, oh, ow = dout.shape
    win = np.zeros((n, c, oh, ow, k * k))
    np.put_along_axis(win, arg[..., None], dout[..., None], axis=-1)
    win = win.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh * k, ow * k)
    dx = np.zeros((n, c, h, w))
    dx[:, :, : oh * k, : ow * k] = win
    return dx


def gather(x, index):
    n, c, h, w = x.shape
    flat = x.reshape(n, c, h * w)
    safe = np.where(index < 0, 0, index).reshape(n, 1, -1)
    out = np.take_along_axis(flat, np.broadcast_to(safe, (n, c, safe.shape[-1])), axis=-1)
    out = out.reshape(n, c, *index.shape[1:])
    out[np.broadcast_to((index < 0)[:, None], out.shape)] = 0.0
    return out


def scatter_add(dout, index, h, w):
    n, c = dout.shape[:2]
    size = n * c * h * w
    base = (np.arange(n * c, dtype=np.int64) * (h * w)).reshape(n, c, 1, 1)
    flat_idx = np.broadcast_to(index[:, None], dout.shape) + base
    valid = np.broadcast_to((index >= 0)[:, None], dout.shape)
    dx = np.bincount(flat_idx[valid], weights=dout[valid], minlength=size)
    return dx.reshape(n, c, h, w)
