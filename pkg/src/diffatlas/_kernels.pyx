# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: direct 2-D convolution (forward/backward) and the
xoshiro256++ Gaussian fill.

The pure-numpy fallbacks live in diffatlas.backend; both sides implement the
same contracts. The Gaussian stream is bit-identical across backends (same
generator, same Box-Muller pairing, same libm calls); convolution agrees to
floating-point reassociation only.
"""

cimport numpy as cnp

from libc.math cimport cos, log, sin, sqrt
from scipy.linalg.cython_blas cimport sgemm

import numpy as np


cdef inline unsigned long long _rotl(unsigned long long x, int k) nogil:
    return (x << k) | (x >> (64 - k))


cdef inline unsigned long long _next(unsigned long long *s) nogil:
    cdef unsigned long long result = _rotl(s[0] + s[3], 23) + s[0]
    cdef unsigned long long t = s[1] << 17
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = _rotl(s[3], 45)
    return result


def fill_gaussian(cnp.uint64_t[::1] state, float[::1] out):
    """Fill `out` with standard normals drawn from the xoshiro256++ stream.

    Box-Muller on consecutive uniform pairs; for odd lengths the second half
    of the final pair is discarded. `state` (4 words) is advanced in place.
    """
    cdef unsigned long long s[4]
    cdef Py_ssize_t n = out.shape[0]
    cdef Py_ssize_t i = 0
    cdef double u1, u2, r
    cdef double TWO_PI = 6.283185307179586
    cdef double SCALE = 1.0 / 9007199254740992.0  # 2**-53
    s[0] = state[0]
    s[1] = state[1]
    s[2] = state[2]
    s[3] = state[3]
    with nogil:
        while i < n:
            u1 = <double> ((_next(s) >> 11) + 1) * SCALE  # (0, 1]
            u2 = <double> (_next(s) >> 11) * SCALE        # [0, 1)
            r = sqrt(-2.0 * log(u1))
            out[i] = <float> (r * cos(TWO_PI * u2))
            i += 1
            if i < n:
                out[i] = <float> (r * sin(TWO_PI * u2))
                i += 1
    state[0] = s[0]
    state[1] = s[1]
    state[2] = s[2]
    state[3] = s[3]


cdef void _im2col(const float *xn, float *cols, Py_ssize_t Cin, Py_ssize_t H,
                  Py_ssize_t W, Py_ssize_t k, int pad, int stride,
                  Py_ssize_t Ho, Py_ssize_t Wo) nogil:
    """Patch matrix for one sample: cols[(ci*k+ki)*k+kj, ho*Wo+wo]."""
    cdef Py_ssize_t P = Ho * Wo
    cdef Py_ssize_t ci, ki, kj, ho, wo, hi, wi
    cdef const float *src
    cdef float *dst
    cdef Py_ssize_t row = 0
    for ci in range(Cin):
        for ki in range(k):
            for kj in range(k):
                dst = cols + row * P
                for ho in range(Ho):
                    hi = ho * stride + ki - pad
                    if hi < 0 or hi >= H:
                        for wo in range(Wo):
                            dst[ho * Wo + wo] = 0.0
                        continue
                    src = xn + ci * H * W + hi * W
                    for wo in range(Wo):
                        wi = wo * stride + kj - pad
                        if wi < 0 or wi >= W:
                            dst[ho * Wo + wo] = 0.0
                        else:
                            dst[ho * Wo + wo] = src[wi]
                row += 1


def conv2d_forward(const float[:, :, :, ::1] x, const float[:, :, :, ::1] w,
                   const float[::1] b, int pad, int stride,
                   float[:, :, :, ::1] out):
    """out[n,co] = b[co] + sum_ci cross_correlate(x[n,ci], w[co,ci]).

    im2col per sample, then one sgemm into the output slice.
    """
    cdef Py_ssize_t N = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Cout = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t Ho = out.shape[2], Wo = out.shape[3]
    cdef Py_ssize_t P = Ho * Wo, K = Cin * k * k
    cdef cnp.ndarray cols_arr = np.empty((K, P), dtype=np.float32)
    cdef float *cols = <float *> cnp.PyArray_DATA(cols_arr)
    cdef const float *xp = &x[0, 0, 0, 0]
    cdef const float *wp = &w[0, 0, 0, 0]
    cdef float *op = &out[0, 0, 0, 0]
    cdef float one = 1.0, zero = 0.0, bco
    cdef int m_ = <int> P, n_ = <int> Cout, k_ = <int> K
    cdef Py_ssize_t n, co, i
    cdef float *yn
    with nogil:
        for n in range(N):
            _im2col(xp + n * Cin * H * W, cols, Cin, H, W, k, pad, stride, Ho, Wo)
            yn = op + n * Cout * P
            # row-major Y[Cout,P] = W[Cout,K] @ cols[K,P] via Fortran Y^T = cols^T W^T
            sgemm("N", "N", &m_, &n_, &k_, &one, cols, &m_, <float *> wp, &k_, &zero, yn, &m_)
            for co in range(Cout):
                bco = b[co]
                for i in range(P):
                    yn[co * P + i] = yn[co * P + i] + bco


def conv2d_backward(const float[:, :, :, ::1] x, const float[:, :, :, ::1] w,
                    const float[:, :, :, ::1] gy, int pad, int stride,
                    float[:, :, :, ::1] gx, float[:, :, :, ::1] gw,
                    float[::1] gb):
    """Accumulate input/weight/bias gradients for conv2d_forward.

    gx, gw, gb must be zero-initialized by the caller.
    """
    cdef Py_ssize_t N = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Cout = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t Ho = gy.shape[2], Wo = gy.shape[3]
    cdef Py_ssize_t P = Ho * Wo, K = Cin * k * k
    cdef cnp.ndarray cols_arr = np.empty((K, P), dtype=np.float32)
    cdef cnp.ndarray gcols_arr = np.empty((K, P), dtype=np.float32)
    cdef float *cols = <float *> cnp.PyArray_DATA(cols_arr)
    cdef float *gcols = <float *> cnp.PyArray_DATA(gcols_arr)
    cdef const float *xp = &x[0, 0, 0, 0]
    cdef const float *wp = &w[0, 0, 0, 0]
    cdef const float *gyp = &gy[0, 0, 0, 0]
    cdef float *gxp = &gx[0, 0, 0, 0]
    cdef float *gwp = &gw[0, 0, 0, 0]
    cdef float one = 1.0, zero = 0.0
    cdef int p_ = <int> P, cout_ = <int> Cout, k_ = <int> K
    cdef Py_ssize_t n, co, ci, ki, kj, ho, wo, hi, wi, i, row
    cdef const float *gyn
    cdef float *gxn
    cdef float acc
    with nogil:
        for n in range(N):
            gyn = gyp + n * Cout * P
            for co in range(Cout):
                acc = 0.0
                for i in range(P):
                    acc = acc + gyn[co * P + i]
                gb[co] = gb[co] + acc
            _im2col(xp + n * Cin * H * W, cols, Cin, H, W, k, pad, stride, Ho, Wo)
            # GW[Cout,K] += GY[Cout,P] @ cols[K,P]^T
            sgemm("T", "N", &k_, &cout_, &p_, &one, cols, &p_, <float *> gyn, &p_, &one, gwp, &k_)
            # GCOLS[K,P] = W[Cout,K]^T @ GY[Cout,P]
            sgemm("N", "T", &p_, &k_, &cout_, &one, <float *> gyn, &p_, <float *> wp, &k_, &zero, gcols, &p_)
            # col2im scatter-add
            gxn = gxp + n * Cin * H * W
            row = 0
            for ci in range(Cin):
                for ki in range(k):
                    for kj in range(k):
                        for ho in range(Ho):
                            hi = ho * stride + ki - pad
                            if hi < 0 or hi >= H:
                                continue
                            for wo in range(Wo):
                                wi = wo * stride + kj - pad
                                if wi < 0 or wi >= W:
                                    continue
                                gxn[ci * H * W + hi * W + wi] = gxn[ci * H * W + hi * W + wi] + gcols[row * P + ho * Wo + wo]
                        row += 1
