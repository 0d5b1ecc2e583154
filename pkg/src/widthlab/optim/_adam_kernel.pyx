# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Fused Adam-family moment update and direction, one pass over a flat block.

Updates ``m`` and ``v`` in place, writes the (bias-corrected) direction into
``out``. With ``want_sumsq`` it also returns the direction's sum of squares
(needed only for block-RMS clipping); the reduction is kept out of the main
loop otherwise so the compiler can vectorize it.

The atan2 variant fills the two arctan arguments in the loop and leaves the
arctan itself to numpy, whose SIMD ``arctan2`` beats scalar libm by ~2x.
"""
import numpy as np

from libc.math cimport sqrt


def adam_direction(const double[::1] g, double[::1] m, double[::1] v,
                   double beta1, double beta2, double bc1, double bc2, double eps,
                   bint use_atan2, double atan2_a, double atan2_b, double[::1] out,
                   bint want_sumsq=True):
    cdef Py_ssize_t i, size = g.shape[0]
    cdef double one_m_b1 = 1.0 - beta1, one_m_b2 = 1.0 - beta2
    cdef double gi, mh, vh, acc = 0.0
    cdef double[::1] den
    if m.shape[0] != size or v.shape[0] != size or out.shape[0] != size:
        raise ValueError("adam_direction: block sizes differ")
    if use_atan2:
        den_arr = np.empty(size, dtype=np.float64)
        den = den_arr
        with nogil:
            for i in range(size):
                gi = g[i]
                m[i] = beta1 * m[i] + one_m_b1 * gi
                v[i] = beta2 * v[i] + one_m_b2 * (gi * gi)
                out[i] = m[i] / bc1
                den[i] = atan2_b * sqrt(v[i] / bc2)
        out_arr = np.asarray(out)
        np.arctan2(out_arr, den_arr, out=out_arr)
        out_arr *= atan2_a
    else:
        with nogil:
            for i in range(size):
                gi = g[i]
                m[i] = beta1 * m[i] + one_m_b1 * gi
                v[i] = beta2 * v[i] + one_m_b2 * (gi * gi)
                mh = m[i] / bc1
                vh = v[i] / bc2
                out[i] = mh / (sqrt(vh) + eps)
    if want_sumsq:
        with nogil:
            for i in range(size):
                acc += out[i] * out[i]
    return acc if want_sumsq else None
