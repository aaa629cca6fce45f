# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled BPE merge loop; semantics mirror _kernels_py.bpe_merge exactly."""

from libc.stdlib cimport malloc, free


def bpe_merge(list symbols, dict merges):
    """Greedy lowest-rank pair merging over a word's symbol ids.

    ``merges`` maps ``(left << 32) | right`` to ``(rank << 32) | merged_id``.
    """
    cdef Py_ssize_t n = len(symbols)
    if n < 2:
        return list(symbols)
    cdef long long *buf = <long long *> malloc(n * sizeof(long long))
    if buf == NULL:
        raise MemoryError()
    cdef Py_ssize_t i, j
    cdef long long key, val, best, best_left, best_right, merged
    cdef object hit
    try:
        for i in range(n):
            buf[i] = symbols[i]
        while n > 1:
            best = -1
            for i in range(n - 1):
                key = (buf[i] << 32) | buf[i + 1]
                hit = merges.get(key)
                if hit is not None:
                    val = hit
                    if best < 0 or (val >> 32) < (best >> 32):
                        best = val
                        best_left = buf[i]
                        best_right = buf[i + 1]
            if best < 0:
                break
            merged = best & 0xFFFFFFFF
            j = 0
            i = 0
            while i < n:
                if i < n - 1 and buf[i] == best_left and buf[i + 1] == best_right:
                    buf[j] = merged
                    i += 2
                else:
                    buf[j] = buf[i]
                    i += 1
                j += 1
            n = j
        return [buf[i] for i in range(n)]
    finally:
        free(buf)
