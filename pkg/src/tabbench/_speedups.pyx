# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``tabbench._purepy``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport erfc, exp, log, sqrt, INFINITY

cnp.import_array()

cdef double LOG_SQRT_2PI = 0.9189385332046727
cdef double INV_SQRT2 = 0.7071067811865476


cdef inline double _ndtr(double z) nogil:
    return 0.5 * erfc(-z * INV_SQRT2)


def midranks(values):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] x = np.ascontiguousarray(values, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] order = np.argsort(x, kind="mergesort").astype(np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] ranks = np.empty(n, dtype=np.float64)
    cdef Py_ssize_t i = 0, j, t
    cdef double r
    with nogil:
        while i < n:
            j = i + 1
            while j < n and x[order[j]] == x[order[i]]:
                j += 1
            r = (i + j + 1) * 0.5
            for t in range(i, j):
                ranks[order[t]] = r
            i = j
    return ranks


def auc_binary(scores, positive):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] ranks = midranks(scores)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] pos = np.ascontiguousarray(positive, dtype=np.uint8)
    cdef Py_ssize_t n = ranks.shape[0], i
    cdef double rank_sum = 0.0
    cdef long n_pos = 0
    for i in range(n):
        if pos[i]:
            rank_sum += ranks[i]
            n_pos += 1
    cdef long n_neg = n - n_pos
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (<double>n_pos * n_neg)


def scatter_add_rows(cnp.float64_t[:, ::1] target, idx, src):
    cdef cnp.int64_t[::1] ix = np.ascontiguousarray(idx, dtype=np.int64)
    cdef cnp.float64_t[:, ::1] s = np.ascontiguousarray(src, dtype=np.float64)
    cdef Py_ssize_t n = ix.shape[0], d = s.shape[1], i, k, row
    cdef Py_ssize_t v = target.shape[0]
    for i in range(n):
        if ix[i] < 0 or ix[i] >= v:
            raise IndexError("index %d out of bounds for %d rows" % (ix[i], v))
    with nogil:
        for i in range(n):
            row = ix[i]
            for k in range(d):
                target[row, k] += s[i, k]


def parzen_logpdf(x, mus, sigmas, weights, double low, double high):
    cdef cnp.float64_t[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.float64_t[::1] mu = np.ascontiguousarray(mus, dtype=np.float64)
    cdef cnp.float64_t[::1] sg = np.ascontiguousarray(sigmas, dtype=np.float64)
    cdef cnp.float64_t[::1] w = np.ascontiguousarray(weights, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], k = mu.shape[0], i, j
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] base = np.empty(k, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] terms = np.empty(k, dtype=np.float64)
    cdef double mass, z, m, acc
    for j in range(k):
        mass = _ndtr((high - mu[j]) / sg[j]) - _ndtr((low - mu[j]) / sg[j])
        if mass < 1e-300:
            mass = 1e-300
        base[j] = log(w[j]) - LOG_SQRT_2PI - log(sg[j]) - log(mass)
    with nogil:
        for i in range(n):
            m = -INFINITY
            for j in range(k):
                z = (xv[i] - mu[j]) / sg[j]
                terms[j] = base[j] - 0.5 * z * z
                if terms[j] > m:
                    m = terms[j]
            acc = 0.0
            for j in range(k):
                acc += exp(terms[j] - m)
            out[i] = m + log(acc)
    return out


def attention_forward(q, k, v, int n_heads, keep=None):
    cdef double[:, :, ::1] Q = np.ascontiguousarray(q, dtype=np.float64)
    cdef double[:, :, ::1] K = np.ascontiguousarray(k, dtype=np.float64)
    cdef double[:, :, ::1] V = np.ascontiguousarray(v, dtype=np.float64)
    cdef Py_ssize_t m = Q.shape[0], t = Q.shape[1], d = Q.shape[2]
    cdef Py_ssize_t dh = d // n_heads
    cdef Py_ssize_t b, h, i, j, e, off
    cdef bint use_keep = keep is not None
    cdef double[:, :, :, ::1] M
    if use_keep:
        M = np.ascontiguousarray(keep, dtype=np.float64)
    else:
        M = np.empty((1, 1, 1, 1))
    a_arr = np.empty((m, n_heads, t, t))
    out_arr = np.zeros((m, t, d))
    cdef double[:, :, :, ::1] A = a_arr
    cdef double[:, :, ::1] O = out_arr
    cdef double c = 1.0 / sqrt(<double>dh)
    cdef double s, mx, tot, w
    with nogil:
        for b in range(m):
            for h in range(n_heads):
                off = h * dh
                for i in range(t):
                    mx = -INFINITY
                    for j in range(t):
                        s = 0.0
                        for e in range(dh):
                            s = s + Q[b, i, off + e] * K[b, j, off + e]
                        s = s * c
                        A[b, h, i, j] = s
                        if s > mx:
                            mx = s
                    tot = 0.0
                    for j in range(t):
                        w = exp(A[b, h, i, j] - mx)
                        A[b, h, i, j] = w
                        tot = tot + w
                    for j in range(t):
                        A[b, h, i, j] = A[b, h, i, j] / tot
                        w = A[b, h, i, j]
                        if use_keep:
                            w = w * M[b, h, i, j]
                        for e in range(dh):
                            O[b, i, off + e] += w * V[b, j, off + e]
    return a_arr, out_arr


def attention_backward(g, q, k, v, a, int n_heads, keep=None):
    cdef double[:, :, ::1] G = np.ascontiguousarray(g, dtype=np.float64)
    cdef double[:, :, ::1] Q = np.ascontiguousarray(q, dtype=np.float64)
    cdef double[:, :, ::1] K = np.ascontiguousarray(k, dtype=np.float64)
    cdef double[:, :, ::1] V = np.ascontiguousarray(v, dtype=np.float64)
    cdef double[:, :, :, ::1] A = np.ascontiguousarray(a, dtype=np.float64)
    cdef Py_ssize_t m = Q.shape[0], t = Q.shape[1], d = Q.shape[2]
    cdef Py_ssize_t dh = d // n_heads
    cdef Py_ssize_t b, h, i, j, e, off
    cdef bint use_keep = keep is not None
    cdef double[:, :, :, ::1] M
    if use_keep:
        M = np.ascontiguousarray(keep, dtype=np.float64)
    else:
        M = np.empty((1, 1, 1, 1))
    gq_arr, gk_arr, gv_arr = np.zeros((m, t, d)), np.zeros((m, t, d)), np.zeros((m, t, d))
    cdef double[:, :, ::1] GQ = gq_arr
    cdef double[:, :, ::1] GK = gk_arr
    cdef double[:, :, ::1] GV = gv_arr
    row_arr = np.empty(t)
    cdef double[::1] row = row_arr
    cdef double c = 1.0 / sqrt(<double>dh)
    cdef double s, dot, w
    with nogil:
        for b in range(m):
            for h in range(n_heads):
                off = h * dh
                for i in range(t):
                    dot = 0.0
                    for j in range(t):
                        # gradient w.r.t. the dropped-out weight, then w.r.t. V
                        s = 0.0
                        for e in range(dh):
                            s = s + G[b, i, off + e] * V[b, j, off + e]
                        w = A[b, h, i, j]
                        if use_keep:
                            s = s * M[b, h, i, j]
                            w = w * M[b, h, i, j]
                        for e in range(dh):
                            GV[b, j, off + e] += w * G[b, i, off + e]
                        row[j] = s
                        dot = dot + s * A[b, h, i, j]
                    for j in range(t):
                        s = A[b, h, i, j] * (row[j] - dot) * c
                        for e in range(dh):
                            GQ[b, i, off + e] += s * K[b, j, off + e]
                            GK[b, j, off + e] += s * Q[b, i, off + e]
    return gq_arr, gk_arr, gv_arr
