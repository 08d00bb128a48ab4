# cython: boundscheck=False, wraparound=False, cdivision=True
# Compiled convolution kernels. Inputs are zero-padded up front so the hot
# loops carry no bounds branches. Per-output-element accumulation runs in
# (c_in, ky, kx) order with the bias added last, matching conv_np and the
# naive-loop oracle; -ffast-math is deliberately not used so the compiler
# cannot reorder the sums.

import numpy as np


def _padded(x, Py_ssize_t pad):
    if pad == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d_forward(x, w, b, int stride, int pad):
    cdef double[:, :, :, ::1] xp = _padded(x, pad)
    cdef double[:, :, :, ::1] wv = w
    cdef double[::1] bv = b
    cdef Py_ssize_t bsz = x.shape[0], cin = x.shape[1], h = x.shape[2], win = x.shape[3]
    cdef Py_ssize_t cout = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (win + 2 * pad - kw) // stride + 1
    out_arr = np.empty((bsz, cout, ho, wo))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t bi, co, oy, ox, ci, ky, kx, iy, ix0
    cdef double acc
    with nogil:
        for bi in range(bsz):
            for co in range(cout):
                for oy in range(ho):
                    for ox in range(wo):
                        acc = 0.0
                        ix0 = ox * stride
                        for ci in range(cin):
                            for ky in range(kh):
                                iy = oy * stride + ky
                                for kx in range(kw):
                                    acc += xp[bi, ci, iy, ix0 + kx] * wv[co, ci, ky, kx]
                        out[bi, co, oy, ox] = acc + bv[co]
    return out_arr


def conv2d_backward_input(dout, w, x_shape, int stride, int pad):
    cdef Py_ssize_t bsz = x_shape[0], cin = x_shape[1], h = x_shape[2], win = x_shape[3]
    cdef Py_ssize_t cout = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef double[:, :, :, ::1] dv = np.ascontiguousarray(dout)
    cdef double[:, :, :, ::1] wv = w
    cdef Py_ssize_t ho = dout.shape[2], wo = dout.shape[3]
    gxp_arr = np.zeros((bsz, cin, h + 2 * pad, win + 2 * pad))
    cdef double[:, :, :, ::1] gxp = gxp_arr
    cdef Py_ssize_t bi, co, oy, ox, ci, ky, kx, iy, ix0
    cdef double g
    with nogil:
        for bi in range(bsz):
            for co in range(cout):
                for oy in range(ho):
                    for ox in range(wo):
                        g = dv[bi, co, oy, ox]
                        ix0 = ox * stride
                        for ci in range(cin):
                            for ky in range(kh):
                                iy = oy * stride + ky
                                for kx in range(kw):
                                    gxp[bi, ci, iy, ix0 + kx] += g * wv[co, ci, ky, kx]
    if pad == 0:
        return gxp_arr
    return np.ascontiguousarray(gxp_arr[:, :, pad:pad + h, pad:pad + win])


def conv2d_backward_weight(dout, x, w_shape, int stride, int pad):
    cdef Py_ssize_t cout = w_shape[0], cin = w_shape[1], kh = w_shape[2], kw = w_shape[3]
    cdef double[:, :, :, ::1] xp = _padded(x, pad)
    cdef double[:, :, :, ::1] dv = np.ascontiguousarray(dout)
    cdef Py_ssize_t bsz = x.shape[0]
    cdef Py_ssize_t ho = dout.shape[2], wo = dout.shape[3]
    gw_arr = np.zeros((cout, cin, kh, kw))
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef Py_ssize_t bi, co, oy, ox, ci, ky, kx, iy, ix0
    cdef double acc
    with nogil:
        for co in range(cout):
            for ci in range(cin):
                for ky in range(kh):
                    for kx in range(kw):
                        acc = 0.0
                        for bi in range(bsz):
                            for oy in range(ho):
                                iy = oy * stride + ky
                                for ox in range(wo):
                                    acc += dv[bi, co, oy, ox] * xp[bi, ci, iy, ox * stride + kx]
                        gw[co, ci, ky, kx] = acc
    return gw_arr
