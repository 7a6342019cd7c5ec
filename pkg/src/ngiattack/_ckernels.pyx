# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops for the tensor core.

Each function mirrors one in ``_pykernels`` and accumulates in the same
order, so both backends return bit-identical arrays.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(const double[:, :, :, ::1] xp, int kh, int kw, int stride):
    cdef Py_ssize_t n_img = xp.shape[0], chans = xp.shape[1]
    cdef Py_ssize_t hp = xp.shape[2], wp = xp.shape[3]
    cdef Py_ssize_t oh = (hp - kh) // stride + 1, ow = (wp - kw) // stride + 1
    out = np.empty((n_img, oh, ow, chans, kh, kw), dtype=np.float64)
    cdef double[:, :, :, :, :, ::1] cols = out
    cdef Py_ssize_t n, a, b, c, i, j, r0, c0
    for n in range(n_img):
        for a in range(oh):
            r0 = a * stride
            for b in range(ow):
                c0 = b * stride
                for c in range(chans):
                    for i in range(kh):
                        for j in range(kw):
                            cols[n, a, b, c, i, j] = xp[n, c, r0 + i, c0 + j]
    return out


def col2im(const double[:, :, :, :, :, ::1] cols, Py_ssize_t hp, Py_ssize_t wp, int stride):
    cdef Py_ssize_t n_img = cols.shape[0], oh = cols.shape[1], ow = cols.shape[2]
    cdef Py_ssize_t chans = cols.shape[3], kh = cols.shape[4], kw = cols.shape[5]
    out = np.zeros((n_img, chans, hp, wp), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = out
    cdef Py_ssize_t n, a, b, c, i, j
    for n in range(n_img):
        for c in range(chans):
            for i in range(kh):
                for j in range(kw):
                    for a in range(oh):
                        for b in range(ow):
                            dx[n, c, a * stride + i, b * stride + j] += cols[n, a, b, c, i, j]
    return out


def maxpool_forward(const double[:, :, :, ::1] x, int k):
    cdef Py_ssize_t n_img = x.shape[0], chans = x.shape[1]
    cdef Py_ssize_t oh = x.shape[2] // k, ow = x.shape[3] // k
    out = np.empty((n_img, chans, oh, ow), dtype=np.float64)
    arg = np.empty((n_img, chans, oh, ow), dtype=np.int64)
    cdef double[:, :, :, ::1] o = out
    cdef cnp.int64_t[:, :, :, ::1] am = arg
    cdef Py_ssize_t n, c, a, b, i, j, best_i
    cdef double best, v
    for n in range(n_img):
        for c in range(chans):
            for a in range(oh):
                for b in range(ow):
                    best = x[n, c, a * k, b * k]
                    best_i = 0
                    for i in range(k):
                        for j in range(k):
                            v = x[n, c, a * k + i, b * k + j]
                            if v > best:
                                best = v
                                best_i = i * k + j
                    o[n, c, a, b] = best
                    am[n, c, a, b] = best_i
    return out, arg


def maxpool_backward(const double[:, :, :, ::1] dout, const cnp.int64_t[:, :, :, ::1] arg,
                     Py_ssize_t h, Py_ssize_t w, int k):
    cdef Py_ssize_t n_img = dout.shape[0], chans = dout.shape[1]
    cdef Py_ssize_t oh = dout.shape[2], ow = dout.shape[3]
    out = np.zeros((n_img, chans, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = out
    cdef Py_ssize_t n, c, a, b, idx
    for n in range(n_img):
        for c in range(chans):
            for a in range(oh):
                for b in range(ow):
                    idx = arg[n, c, a, b]
                    dx[n, c, a * k + idx // k, b * k + idx % k] = dout[n, c, a, b]
    return out


def gather(const double[:, :, :, ::1] x, const cnp.int64_t[:, :, ::1] index):
    cdef Py_ssize_t n_img = x.shape[0], chans = x.shape[1], w = x.shape[3]
    cdef Py_ssize_t oh = index.shape[1], ow = index.shape[2]
    out = np.empty((n_img, chans, oh, ow), dtype=np.float64)
    cdef double[:, :, :, ::1] o = out
    cdef Py_ssize_t n, c, a, b
    cdef cnp.int64_t src
    for n in range(n_img):
        for c in range(chans):
            for a in range(oh):
                for b in range(ow):
                    src = index[n, a, b]
                    if src < 0:
                        o[n, c, a, b] = 0.0
                    else:
                        o[n, c, a, b] = x[n, c, src // w, src % w]
    return out


def scatter_add(const double[:, :, :, ::1] dout, const cnp.int64_t[:, :, ::1] index,
                Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t n_img = dout.shape[0], chans = dout.shape[1]
    cdef Py_ssize_t oh = dout.shape[2], ow = dout.shape[3]
    out = np.zeros((n_img, chans, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = out
    cdef Py_ssize_t n, c, a, b
    cdef cnp.int64_t src
    for n in range(n_img):
        for c in range(chans):
            for a in range(oh):
                for b in range(ow):
                    src = index[n, a, b]
                    if src >= 0:
                        dx[n, c, src // w, src % w] += dout[n, c, a, b]
    return out
