# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels.  Contracts match ``pmgmra._pykernels`` exactly."""
import numpy as np

from libc.math cimport ldexp, INFINITY

from .errors import DuplicatePoint


cdef inline double _sqdist(const double[:, ::1] X, Py_ssize_t a,
                           Py_ssize_t b) noexcept nogil:
    cdef Py_ssize_t k
    cdef double s = 0.0, t
    for k in range(X.shape[1]):
        t = X[a, k] - X[b, k]
        s += t * t
    return s


def cover_tree_insert(X, int top_scale):
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef Py_ssize_t n = Xv.shape[0]
    parent_arr = np.full(n, -1, dtype=np.int64)
    scale_arr = np.empty(n, dtype=np.int32)
    cdef long long[::1] parent = parent_arr
    cdef int[::1] scale = scale_arr
    cdef long long[::1] first_child = np.full(n, -1, dtype=np.int64)
    cdef long long[::1] last_child = np.full(n, -1, dtype=np.int64)
    cdef long long[::1] next_sib = np.full(n, -1, dtype=np.int64)
    cdef long long[::1] qa_ids = np.empty(max(n, 1), dtype=np.int64)
    cdef long long[::1] qb_ids = np.empty(max(n, 1), dtype=np.int64)
    cdef double[::1] qa_d = np.empty(max(n, 1), dtype=np.float64)
    cdef double[::1] qb_d = np.empty(max(n, 1), dtype=np.float64)
    cdef long long[::1] tmp_ids
    cdef double[::1] tmp_d
    cdef Py_ssize_t p, t, cur_n, m
    cdef long long c, q, bq, best_q
    cdef int level, best_level
    cdef double bound, bd, d
    cdef long long dup_a = -1, dup_b = -1

    if n == 0:
        return parent_arr, scale_arr
    scale[0] = top_scale
    with nogil:
        for p in range(1, n):
            qa_ids[0] = 0
            qa_d[0] = _sqdist(Xv, p, 0)
            if qa_d[0] == 0.0:
                dup_a = 0
                dup_b = p
                break
            cur_n = 1
            level = top_scale
            best_q = -1
            best_level = top_scale
            while True:
                bound = ldexp(1.0, 2 * level)
                bd = INFINITY
                bq = -1
                m = 0
                for t in range(cur_n):
                    if qa_d[t] <= bound:
                        if qa_d[t] < bd or (qa_d[t] == bd and qa_ids[t] < bq):
                            bd = qa_d[t]
                            bq = qa_ids[t]
                        qb_ids[m] = qa_ids[t]
                        qb_d[m] = qa_d[t]
                        m += 1
                if bq >= 0:
                    best_q = bq
                    best_level = level
                for t in range(cur_n):
                    c = first_child[qa_ids[t]]
                    while c >= 0:
                        if scale[c] == level - 1:
                            d = _sqdist(Xv, p, c)
                            if d == 0.0:
                                dup_a = c
                                dup_b = p
                                break
                            if d <= bound:
                                qb_ids[m] = c
                                qb_d[m] = d
                                m += 1
                        c = next_sib[c]
                    if dup_a >= 0:
                        break
                if dup_a >= 0 or m == 0:
                    break
                tmp_ids = qa_ids
                qa_ids = qb_ids
                qb_ids = tmp_ids
                tmp_d = qa_d
                qa_d = qb_d
                qb_d = tmp_d
                cur_n = m
                level -= 1
            if dup_a >= 0:
                break
            parent[p] = best_q
            scale[p] = best_level - 1
            if last_child[best_q] < 0:
                first_child[best_q] = p
            else:
                next_sib[last_child[best_q]] = p
            last_child[best_q] = p
    if dup_a >= 0:
        raise DuplicatePoint(dup_a, dup_b)
    return parent_arr, scale_arr


def separation_violations(X, scale):
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef const int[::1] sv = np.ascontiguousarray(scale, dtype=np.int32)
    cdef Py_ssize_t n = Xv.shape[0], u, v
    cdef int lvl
    us, vs = [], []
    for u in range(n - 1):
        for v in range(u + 1, n):
            lvl = sv[u] if sv[u] < sv[v] else sv[v]
            if _sqdist(Xv, u, v) <= ldexp(1.0, 2 * lvl):
                us.append(u)
                vs.append(v)
    return np.asarray(us, dtype=np.int64), np.asarray(vs, dtype=np.int64)
