# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops for routing and per-slot gradient regrouping."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def fcfs_assign(const cnp.int64_t[::1] experts, Py_ssize_t num_experts, Py_ssize_t capacity):
    cdef Py_ssize_t m = experts.shape[0]
    cdef Py_ssize_t i, e, c
    slot_np = np.full(m, -1, dtype=np.int64)
    counts_np = np.zeros(num_experts, dtype=np.int64)
    slot_token_np = np.full((num_experts, capacity), -1, dtype=np.int64)
    cdef cnp.int64_t[::1] slot = slot_np
    cdef cnp.int64_t[::1] counts = counts_np
    cdef cnp.int64_t[:, ::1] slot_token = slot_token_np
    for i in range(m):
        e = experts[i]
        if e < 0 or e >= num_experts:
            raise IndexError(f"expert id {e} out of range")
        c = counts[e]
        if c < capacity:
            slot[i] = c
            slot_token[e, c] = i
            counts[e] = c + 1
    return slot_np, counts_np, slot_token_np


def segment_outer_sum(const double[:, ::1] dy, const double[:, ::1] x,
                      const cnp.int64_t[::1] owner, Py_ssize_t num_samples):
    cdef Py_ssize_t nslots = dy.shape[0]
    cdef Py_ssize_t n = dy.shape[1]
    cdef Py_ssize_t m = x.shape[1]
    cdef Py_ssize_t c, b, i, j
    cdef double g
    out_np = np.zeros((num_samples, n, m), dtype=np.float64)
    cdef double[:, :, ::1] out = out_np
    for c in range(nslots):
        b = owner[c]
        if b < 0:
            continue
        if b >= num_samples:
            raise IndexError(f"slot owner {b} out of range")
        for i in range(n):
            g = dy[c, i]
            if g == 0.0:
                continue
            for j in range(m):
                out[b, i, j] += g * x[c, j]
    return out_np
