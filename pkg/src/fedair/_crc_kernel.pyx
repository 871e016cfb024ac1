# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled table-driven CRC over byte rows (widths 8..64, MSB first)."""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint8_t, uint64_t

cnp.import_array()


def crc_rows(rows, table, init, int width):
    cdef const uint8_t[:, ::1] data = np.ascontiguousarray(rows, dtype=np.uint8)
    cdef const uint64_t[::1] tab = np.ascontiguousarray(table, dtype=np.uint64)
    cdef Py_ssize_t n = data.shape[0], m = data.shape[1], i, j
    cdef uint64_t mask = (<uint64_t>1 << width) - 1 if width < 64 else <uint64_t>0xFFFFFFFFFFFFFFFF
    cdef int shift = width - 8
    cdef uint64_t start = init
    cdef uint64_t reg
    out = np.empty(n, dtype=np.uint64)
    cdef uint64_t[::1] res = out
    with nogil:
        for i in range(n):
            reg = start
            for j in range(m):
                reg = (tab[((reg >> shift) ^ data[i, j]) & 0xFF] ^ (reg << 8)) & mask
            res[i] = reg
    return out
