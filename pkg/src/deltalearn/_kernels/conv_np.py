"""Pure-numpy convolution kernels (fallback backend).

Forward accumulates partial sums in (c_in, ky, kx) order and adds the bias
last; the compiled backend and the naive-loop test oracle follow the same
order, so all three produce identical float64 results on identical inputs.
"""

import numpy as np


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d_forward(x, w, b, stride, pad):
    """Cross-correlate x (B,Ci,H,W) with w (Co,Ci,kh,kw), add bias b (Co,)."""
    bsz, cin, h, win = x.shape
    cout, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (win + 2 * pad - kw) // stride + 1
    xp = _pad(x, pad)
    out = np.zeros((bsz, cout, ho, wo))
    for ci in range(cin):
        for ky in range(kh):
            for kx in range(kw):
                sl = xp[:, ci, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride]
                out += sl[:, None, :, :] * w[:, ci, ky, kx].reshape(1, cout, 1, 1)
    out += b.reshape(1, cout, 1, 1)
    return out


def conv2d_backward_input(dout, w, x_shape, stride, pad):
    bsz, cin, h, win = x_shape
    cout, _, kh, kw = w.shape
    ho, wo = dout.shape[2], dout.shape[3]
    gxp = np.zeros((bsz, cin, h + 2 * pad, win + 2 * pad))
    for ci in range(cin):
        for ky in range(kh):
            for kx in range(kw):
                contrib = np.tensordot(dout, w[:, ci, ky, kx], axes=([1], [0]))
                gxp[:, ci, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride] += contrib
    if pad == 0:
        return gxp
    return np.ascontiguousarray(gxp[:, :, pad:pad + h, pad:pad + win])


def conv2d_backward_weight(dout, x, w_shape, stride, pad):
    cout, cin, kh, kw = w_shape
    ho, wo = dout.shape[2], dout.shape[3]
    xp = _pad(x, pad)
    gw = np.zeros(w_shape)
    for ci in range(cin):
        for ky in range(kh):
            for kx in range(kw):
                sl = xp[:, ci, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride]
                gw[:, ci, ky, kx] = np.tensordot(dout, sl, axes=([0, 2, 3], [0, 1, 2]))
    return gw
