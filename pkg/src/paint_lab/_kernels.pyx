# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row kernels; same API as ``paint_lab._kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()


def softmax_rows(logits, double temperature=1.0):
    cdef const double[:, ::1] x = np.ascontiguousarray(logits, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0], v = x.shape[1], i, j
    probs_arr = np.empty((n, v), dtype=np.float64)
    logp_arr = np.empty((n, v), dtype=np.float64)
    cdef double[:, ::1] probs = probs_arr
    cdef double[:, ::1] logp = logp_arr
    cdef double m, s, lse
    for i in range(n):
        m = x[i, 0] / temperature
        for j in range(1, v):
            if x[i, j] / temperature > m:
                m = x[i, j] / temperature
        s = 0.0
        for j in range(v):
            s += exp(x[i, j] / temperature - m)
        lse = log(s)
        for j in range(v):
            logp[i, j] = (x[i, j] / temperature - m) - lse
            probs[i, j] = exp(logp[i, j])
    return probs_arr, logp_arr


def entropy_rows(probs):
    cdef const double[:, ::1] p = np.ascontiguousarray(probs, dtype=np.float64)
    cdef Py_ssize_t n = p.shape[0], v = p.shape[1], i, j
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double h
    for i in range(n):
        h = 0.0
        for j in range(v):
            if p[i, j] > 0.0:
                h += p[i, j] * log(p[i, j])
        out[i] = -h
    return out_arr


def logsumexp_rows(a):
    cdef const double[:, ::1] x = np.ascontiguousarray(a, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0], v = x.shape[1], i, j
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double m, s
    for i in range(n):
        m = x[i, 0]
        for j in range(1, v):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(v):
            s += exp(x[i, j] - m)
        out[i] = m + log(s)
    return out_arr


def interpolate_rows(p_t, logp_t, logp_s, selected, double k):
    probs_arr = np.array(p_t, dtype=np.float64, order="C", copy=True)
    logp_arr = np.array(logp_t, dtype=np.float64, order="C", copy=True)
    if k == 0.0:
        return probs_arr, logp_arr
    cdef double[:, ::1] probs = probs_arr
    cdef double[:, ::1] logp = logp_arr
    cdef const double[:, ::1] ls = np.ascontiguousarray(logp_s, dtype=np.float64)
    cdef const cnp.uint8_t[::1] sel = np.ascontiguousarray(selected, dtype=np.uint8)
    cdef Py_ssize_t n = probs.shape[0], v = probs.shape[1], i, j
    cdef double m, s, lse, a
    for i in range(n):
        if not sel[i]:
            continue
        m = (1.0 - k) * logp[i, 0] + k * ls[i, 0]
        for j in range(1, v):
            a = (1.0 - k) * logp[i, j] + k * ls[i, j]
            if a > m:
                m = a
        s = 0.0
        for j in range(v):
            logp[i, j] = (1.0 - k) * logp[i, j] + k * ls[i, j] - m
            s += exp(logp[i, j])
        lse = log(s)
        for j in range(v):
            logp[i, j] = logp[i, j] - lse
            probs[i, j] = exp(logp[i, j])
    return probs_arr, logp_arr


def clipped_fkl_rows(p_t, logp_t, logp_s, double tau, bint floor_zero=False):
    cdef const double[:, ::1] pt = np.ascontiguousarray(p_t, dtype=np.float64)
    cdef const double[:, ::1] lt = np.ascontiguousarray(logp_t, dtype=np.float64)
    cdef const double[:, ::1] ls = np.ascontiguousarray(logp_s, dtype=np.float64)
    cdef Py_ssize_t n = pt.shape[0], v = pt.shape[1], i, j
    vals_arr = np.empty(n, dtype=np.float64)
    counts_arr = np.empty(n, dtype=np.int64)
    cdef double[::1] vals = vals_arr
    cdef cnp.int64_t[::1] counts = counts_arr
    cdef double term, acc
    cdef cnp.int64_t c
    for i in range(n):
        acc = 0.0
        c = 0
        for j in range(v):
            if pt[i, j] > 0.0:
                term = pt[i, j] * (lt[i, j] - ls[i, j])
            else:
                term = 0.0
            if term > tau:
                term = tau
                c += 1
            if floor_zero and term < 0.0:
                term = 0.0
            acc += term
        vals[i] = acc
        counts[i] = c
    return vals_arr, counts_arr


def clipped_fkl_grad_rows(p_t, logp_t, p_s, logp_s, double tau, bint floor_zero=False,
                          double temperature=1.0):
    cdef const double[:, ::1] pt = np.ascontiguousarray(p_t, dtype=np.float64)
    cdef const double[:, ::1] lt = np.ascontiguousarray(logp_t, dtype=np.float64)
    cdef const double[:, ::1] ps = np.ascontiguousarray(p_s, dtype=np.float64)
    cdef const double[:, ::1] ls = np.ascontiguousarray(logp_s, dtype=np.float64)
    cdef Py_ssize_t n = pt.shape[0], v = pt.shape[1], i, j
    grad_arr = np.empty((n, v), dtype=np.float64)
    cdef double[:, ::1] g = grad_arr
    cdef double term, mass
    for i in range(n):
        mass = 0.0
        for j in range(v):
            if pt[i, j] > 0.0:
                term = pt[i, j] * (lt[i, j] - ls[i, j])
            else:
                term = 0.0
            if term <= tau and not (floor_zero and term < 0.0):
                g[i, j] = pt[i, j]
                mass += pt[i, j]
            else:
                g[i, j] = 0.0
        for j in range(v):
            g[i, j] = (mass * ps[i, j] - g[i, j]) / temperature
    return grad_arr
