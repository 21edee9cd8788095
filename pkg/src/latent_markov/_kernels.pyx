# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled panel-simulation kernels.

Must stay bit-identical to ``_kernels_py``; the test suite checks both.
"""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint64_t, int64_t
from cython.parallel cimport prange

cnp.import_array()

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL
cdef double TWO_M53 = 1.0 / 9007199254740992.0


cdef inline uint64_t _fmix(uint64_t z) noexcept nogil:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


cdef inline uint64_t _stream_key(uint64_t seed, uint64_t stream) noexcept nogil:
    return _fmix(_fmix(seed + GOLDEN) ^ stream)


def stream_key(seed, stream):
    return int(_stream_key(<uint64_t>seed, <uint64_t>stream))


def uniforms(seed, stream, Py_ssize_t n):
    """``n`` doubles in [0, 1) from the counter stream ``(seed, stream)``."""
    cdef uint64_t key = _stream_key(<uint64_t>seed, <uint64_t>stream)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i
    for i in range(n):
        o[i] = (_fmix(key + <uint64_t>(i + 1) * GOLDEN) >> 11) * TWO_M53
    return out


def categorical_step(const cnp.int64_t[::1] states, const double[:, ::1] cum,
                     seed, stream, int num_threads=1):
    """Move every individual one step.

    Individual ``i`` in state ``s`` draws ``u_i`` from the ``(seed, stream)``
    counter stream and jumps to the first ``j`` with ``u_i < cum[s, j]``.
    """
    cdef Py_ssize_t n = states.shape[0]
    cdef Py_ssize_t J = cum.shape[1]
    cdef uint64_t key = _stream_key(<uint64_t>seed, <uint64_t>stream)
    out = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] o = out
    cdef Py_ssize_t i, j
    cdef double u
    cdef int64_t s
    for i in prange(n, nogil=True, num_threads=num_threads, schedule="static"):
        u = (_fmix(key + <uint64_t>(i + 1) * GOLDEN) >> 11) * TWO_M53
        s = states[i]
        j = 0
        while j < J - 1 and u >= cum[s, j]:
            j = j + 1
        o[i] = j
    return out
