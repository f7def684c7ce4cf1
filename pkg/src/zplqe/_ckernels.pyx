# cython: language_level=3
"""Compiled inner loops for photon time-tag processing.

Both functions mirror ``zplqe._pykernels`` exactly; tests compare the two.
"""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport int64_t, uint8_t

cnp.import_array()


def deadtime_mask(const int64_t[::1] times, int64_t dead):
    """Non-paralyzable dead-time filter over sorted integer timestamps."""
    cdef Py_ssize_t n = times.shape[0]
    cdef Py_ssize_t i
    cdef int64_t last
    out = np.ones(n, dtype=np.uint8)
    cdef uint8_t[::1] keep = out
    if n == 0 or dead <= 0:
        return out.astype(bool)
    last = times[0]
    for i in range(1, n):
        if times[i] - last < dead:
            keep[i] = 0
        else:
            last = times[i]
    return out.astype(bool)


def cross_correlate(const int64_t[::1] t1, const int64_t[::1] t2,
                    int64_t lo, int64_t width, Py_ssize_t nbins):
    """Histogram of t2[j] - t1[i] over bins [lo + k*width, lo + (k+1)*width)."""
    cdef Py_ssize_t n1 = t1.shape[0]
    cdef Py_ssize_t n2 = t2.shape[0]
    cdef Py_ssize_t i, j, start = 0
    cdef int64_t hi = lo + width * nbins
    cdef int64_t d
    out = np.zeros(nbins, dtype=np.int64)
    cdef int64_t[::1] hist = out
    for i in range(n1):
        while start < n2 and t2[start] - t1[i] < lo:
            start += 1
        j = start
        while j < n2:
            d = t2[j] - t1[i]
            if d >= hi:
                break
            hist[(d - lo) // width] += 1
            j += 1
    return out
