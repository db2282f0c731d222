# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
# distutils: language = c++
"""Compiled ranking kernels. Semantics match laso._pykernels exactly."""

import numpy as np
cimport numpy as cnp
from libcpp.algorithm cimport sort, partial_sort
from libcpp.pair cimport pair
from libcpp.vector cimport vector

cnp.import_array()


def average_precision_columns(const double[:, ::1] scores, const cnp.uint8_t[:, ::1] positives):
    """Per-column AP, ranking by descending score with ties by ascending row.

    Columns without positives get NaN.
    """
    cdef Py_ssize_t n = scores.shape[0], k = scores.shape[1]
    cdef Py_ssize_t j, r, i
    cdef double acc, hits, total
    cdef vector[pair[double, Py_ssize_t]] order
    out = np.empty(k, dtype=np.float64)
    cdef double[::1] res = out
    order.resize(n)
    for j in range(k):
        total = 0
        for i in range(n):
            order[i] = pair[double, Py_ssize_t](-scores[i, j], i)
            total += positives[i, j] != 0
        if total == 0:
            res[j] = np.nan
            continue
        sort(order.begin(), order.end())
        acc = 0
        hits = 0
        for r in range(n):
            if positives[order[r].second, j]:
                hits += 1
                acc += hits / (r + 1)
        res[j] = acc / total
    return out


def topk_max_iou(
    const double[:, ::1] dist,
    const cnp.uint8_t[:, ::1] query_labels,
    const cnp.uint8_t[:, ::1] pool_labels,
    const cnp.int64_t[:, ::1] exclude,
    const cnp.int64_t[::1] ks,
):
    """For each query, max IoU over its k nearest non-excluded pool rows.

    ``exclude`` rows list pool indices to skip (padded with -1); ``ks`` is
    ascending. Distance ties are broken by ascending pool index.
    """
    cdef Py_ssize_t nq = dist.shape[0], npool = dist.shape[1], nl = query_labels.shape[1]
    cdef Py_ssize_t ne = exclude.shape[1], nk = ks.shape[0]
    cdef Py_ssize_t kmax = ks[nk - 1]
    cdef Py_ssize_t q, p, e, r, c, l, cnt, inter, uni
    cdef bint skip
    cdef double best, val
    cdef vector[pair[double, Py_ssize_t]] cand
    out = np.empty((nq, nk), dtype=np.float64)
    cdef double[:, ::1] res = out
    cand.reserve(npool)
    for q in range(nq):
        cand.clear()
        for p in range(npool):
            skip = False
            for e in range(ne):
                if exclude[q, e] == p:
                    skip = True
                    break
            if not skip:
                cand.push_back(pair[double, Py_ssize_t](dist[q, p], p))
        cnt = <Py_ssize_t>cand.size()
        if cnt < kmax:
            raise ValueError(f"query {q}: only {cnt} candidates for k={kmax}")
        partial_sort(cand.begin(), cand.begin() + kmax, cand.end())
        best = -1.0
        c = 0
        for r in range(kmax):
            p = cand[r].second
            inter = 0
            uni = 0
            for l in range(nl):
                if query_labels[q, l] and pool_labels[p, l]:
                    inter += 1
                if query_labels[q, l] or pool_labels[p, l]:
                    uni += 1
            val = 1.0 if uni == 0 else (<double>inter) / uni
            if val > best:
                best = val
            while c < nk and ks[c] == r + 1:
                res[q, c] = best
                c += 1
    return out
