# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled closed-loop kernel for the built-in pendulum with its N=2 dictionary."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos, fabs, isfinite, INFINITY

cnp.import_array()


def pendulum_tail_norms(double[:, ::1] x0s, double Ts, double m, double ell, double g, double mu,
                        double[::1] kappa, double[::1] warmup, double[::1] eta0, double[::1] xi0,
                        int horizon, int tail_start, int tail_stop, double overflow):
    cdef Py_ssize_t P = x0s.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(P)
    cdef double a = Ts * g / ell
    cdef double d = 1.0 - Ts * mu / (m * ell * ell)
    cdef double b = Ts / (m * ell)
    cdef double x1, x2, e1, e2, s1, s2, y, u, nx1, tail, v
    cdef Py_ssize_t p
    cdef int k
    with nogil:
        for p in range(P):
            x1 = x0s[p, 0]
            x2 = x0s[p, 1]
            e1 = eta0[0]
            e2 = eta0[1]
            s1 = xi0[0]
            s2 = xi0[1]
            tail = 0.0
            for k in range(horizon + 1):
                if not (isfinite(x1) and isfinite(x2)) or fabs(x1) > overflow or fabs(x2) > overflow:
                    tail = INFINITY
                    break
                y = x1
                if k < 2:
                    u = warmup[k]
                else:
                    u = (kappa[0] * e1 + kappa[1] * e2 + kappa[2] * s1 + kappa[3] * s2
                         + kappa[4] * (sin(e1) - e1) + kappa[5] * (s1 * cos(e1) - s1))
                if tail_start <= k <= tail_stop:
                    v = fabs(x1)
                    if fabs(x2) > v: v = fabs(x2)
                    if fabs(e1) > v: v = fabs(e1)
                    if fabs(e2) > v: v = fabs(e2)
                    if fabs(s1) > v: v = fabs(s1)
                    if fabs(s2) > v: v = fabs(s2)
                    if not (v <= tail): tail = v
                e1 = e2
                e2 = y
                s1 = s2
                s2 = u
                if k < horizon:
                    nx1 = x1 + Ts * x2
                    x2 = a * sin(x1) + d * x2 + b * cos(x1) * u
                    x1 = nx1
            out[p] = tail
    return out
