"""Kernel backend selection.

The hot kernels (conv2d forward/backward, Gaussian RNG fill) exist twice:
compiled Cython in diffatlas._kernels and vectorized numpy here. The compiled
module is used when importable; set DIFFATLAS_BACKEND=python or =compiled to
force a side (forcing `compiled` raises if the extension is missing).

Both implementations satisfy the same contracts. Gaussian streams are
bit-identical across backends; convolutions differ only by float summation
order. Results are bitwise reproducible within either backend.
"""

import math
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_MASK = 0xFFFFFFFFFFFFFFFF
_TWO_PI = 6.283185307179586
_SCALE = 1.0 / 9007199254740992.0  # 2**-53


def _np_conv2d_forward(x, w, b, pad, stride, out):
    n, cin, h, width = x.shape
    cout, _, k, _ = w.shape
    ho, wo = out.shape[2], out.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * k * k)
    y = cols @ w.reshape(cout, cin * k * k).T
    y += b
    out[...] = y.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)


def _np_conv2d_backward(x, w, gy, pad, stride, gx, gw, gb):
    n, cin, h, width = x.shape
    cout, _, k, _ = w.shape
    ho, wo = gy.shape[2], gy.shape[3]
    gb += gy.sum(axis=(0, 2, 3))
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * k * k)
    gym = gy.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
    gw += (gym.T @ cols).reshape(cout, cin, k, k)
    gxp = np.zeros_like(xp)
    for ki in range(k):
        for kj in range(k):
            contrib = np.tensordot(gy, w[:, :, ki, kj], axes=([1], [0]))  # N,Ho,Wo,Cin
            gxp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += contrib.transpose(0, 3, 1, 2)
    gx += gxp[:, :, pad:pad + h, pad:pad + width]


def _xoshiro_next(s):
    """One xoshiro256++ step on a 4-element list of python ints."""
    result = ((((s[0] + s[3]) & _MASK) << 23 | ((s[0] + s[3]) & _MASK) >> 41) + s[0]) & _MASK
    t = (s[1] << 17) & _MASK
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = ((s[3] << 45) | (s[3] >> 19)) & _MASK
    return result


def _np_fill_gaussian(state, out):
    s = [int(state[0]), int(state[1]), int(state[2]), int(state[3])]
    n = out.shape[0]
    vals = np.empty(n, dtype=np.float64)
    i = 0
    nxt, log_, cos_, sin_, sqrt_ = _xoshiro_next, math.log, math.cos, math.sin, math.sqrt
    while i < n:
        u1 = ((nxt(s) >> 11) + 1) * _SCALE
        u2 = (nxt(s) >> 11) * _SCALE
        r = sqrt_(-2.0 * log_(u1))
        vals[i] = r * cos_(_TWO_PI * u2)
        i += 1
        if i < n:
            vals[i] = r * sin_(_TWO_PI * u2)
            i += 1
    out[...] = vals.astype(np.float32)
    state[0], state[1], state[2], state[3] = s


_FORCED = os.environ.get("DIFFATLAS_BACKEND", "auto")
if _FORCED not in ("auto", "compiled", "python"):
    raise RuntimeError(f"DIFFATLAS_BACKEND must be auto/compiled/python, got {_FORCED!r}")

if _FORCED == "python":
    _kernels = None
else:
    try:
        from . import _kernels
    except ImportError:
        if _FORCED == "compiled":
            raise
        _kernels = None

BACKEND = "compiled" if _kernels is not None else "python"


def conv2d_forward(x, w, b, pad, stride, out):
    if _kernels is not None and out.dtype == np.float32:
        _kernels.conv2d_forward(x, w, b, pad, stride, out)
    else:
        _np_conv2d_forward(x, w, b, pad, stride, out)


def conv2d_backward(x, w, gy, pad, stride, gx, gw, gb):
    if _kernels is not None and gx.dtype == np.float32 and gy.dtype == np.float32:
        _kernels.conv2d_backward(x, w, gy, pad, stride, gx, gw, gb)
    else:
        _np_conv2d_backward(x, w, gy, pad, stride, gx, gw, gb)


if _kernels is not None:
    fill_gaussian = _kernels.fill_gaussian
else:
    fill_gaussian = _np_fill_gaussian
