# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: gammatone band analysis and image-source accumulation.

Signatures and results match :mod:`roomvol._pykernels`; see that module for
the reference semantics.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, log, atan2, floor, sin, cos, M_PI

cnp.import_array()


def gammatone_analysis(const double[::1] x, const double complex[::1] poles,
                       const double[::1] gains, const double[::1] window,
                       Py_ssize_t hop, double eps):
    cdef Py_ssize_t n_samples = x.shape[0]
    cdef Py_ssize_t n_bands = poles.shape[0]
    cdef Py_ssize_t win = window.shape[0]
    cdef Py_ssize_t n_frames = (n_samples - win) // hop + 1
    cdef Py_ssize_t centre = win // 2
    cdef Py_ssize_t b, n, f, i, start
    cdef double complex p, s1, s2, s3, s4
    cdef double g, wsum = 0.0, acc, re, im, ph

    mag_arr = np.empty((n_bands, n_frames), dtype=np.float64)
    phase_arr = np.empty((n_bands, n_frames), dtype=np.float64)
    env_arr = np.empty(n_samples, dtype=np.float64)
    zre_arr = np.empty(n_samples, dtype=np.float64)
    zim_arr = np.empty(n_samples, dtype=np.float64)
    cdef double[:, ::1] mag = mag_arr
    cdef double[:, ::1] phase = phase_arr
    cdef double[::1] env = env_arr
    cdef double[::1] zre = zre_arr
    cdef double[::1] zim = zim_arr

    for i in range(win):
        wsum += window[i]

    with nogil:
        for b in range(n_bands):
            p = poles[b]
            g = gains[b]
            s1 = 0
            s2 = 0
            s3 = 0
            s4 = 0
            for n in range(n_samples):
                s1 = x[n] + p * s1
                s2 = s1 + p * s2
                s3 = s2 + p * s3
                s4 = s3 + p * s4
                re = g * s4.real
                im = g * s4.imag
                zre[n] = re
                zim[n] = im
                env[n] = re * re + im * im
            for f in range(n_frames):
                start = f * hop
                acc = 0.0
                for i in range(win):
                    acc = acc + window[i] * env[start + i]
                mag[b, f] = log(eps + sqrt(acc / wsum))
                ph = atan2(zim[start + centre], zre[start + centre])
                if ph == -M_PI:
                    ph = M_PI
                phase[b, f] = ph
    return mag_arr, phase_arr


def accumulate_images(double[::1] out, const double[::1] delays,
                      const double[::1] gains, Py_ssize_t half):
    cdef Py_ssize_t n_out = out.shape[0]
    cdef Py_ssize_t m = delays.shape[0]
    cdef Py_ssize_t j, k, idx, n0
    cdef double d, fr, t, g, width = half + 1.0
    with nogil:
        for j in range(m):
            d = delays[j]
            g = gains[j]
            n0 = <Py_ssize_t>floor(d)
            fr = d - n0
            if fr == 0.0:
                if 0 <= n0 < n_out:
                    out[n0] += g
                continue
            for k in range(-half, half + 1):
                idx = n0 + k
                if idx < 0 or idx >= n_out:
                    continue
                t = k - fr
                out[idx] += g * (sin(M_PI * t) / (M_PI * t)) * 0.5 * (1.0 + cos(M_PI * t / width))
    return np.asarray(out)
