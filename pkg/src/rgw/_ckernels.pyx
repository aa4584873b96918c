# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled Grassmann kernels (see ``_kernels_py`` for the reference versions)."""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint64_t, int64_t

cnp.import_array()


cdef inline int _popcount(uint64_t x) nogil:
    return __builtin_popcountll(x)


cdef extern from *:
    int __builtin_popcountll(unsigned long long) nogil


cdef inline int _sign(uint64_t a, uint64_t b) nogil:
    cdef int swaps = 0
    cdef uint64_t low
    if a & b:
        return 0
    while b:
        low = b & (~b + 1)
        swaps += _popcount(a & ~((low << 1) - 1))
        b ^= low
    return -1 if swaps & 1 else 1


def merge_sign(a, b):
    return _sign(<uint64_t>a, <uint64_t>b)


def merge_signs(cnp.ndarray[cnp.uint64_t, ndim=1] ma, cnp.ndarray[cnp.uint64_t, ndim=1] mb):
    cdef Py_ssize_t n = ma.shape[0], i
    cdef cnp.ndarray[cnp.int64_t, ndim=1] out = np.empty(n, dtype=np.int64)
    for i in range(n):
        out[i] = _sign(ma[i], mb[i])
    return out


def product_terms(cnp.ndarray[cnp.uint64_t, ndim=1] ma, cnp.ndarray[cnp.complex128_t, ndim=1] ca,
                  cnp.ndarray[cnp.uint64_t, ndim=1] mb, cnp.ndarray[cnp.complex128_t, ndim=1] cb):
    cdef Py_ssize_t na = ma.shape[0], nb = mb.shape[0], i, j, k = 0
    cdef cnp.ndarray[cnp.uint64_t, ndim=1] om = np.empty(na * nb, dtype=np.uint64)
    cdef cnp.ndarray[cnp.complex128_t, ndim=1] oc = np.empty(na * nb, dtype=np.complex128)
    cdef int s
    cdef uint64_t a, b
    for i in range(na):
        a = ma[i]
        for j in range(nb):
            b = mb[j]
            if a & b:
                continue
            s = _sign(a, b)
            om[k] = a | b
            oc[k] = s * ca[i] * cb[j]
            k += 1
    return om[:k], oc[:k]
