# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernel backend: the inner loops that dominate runtime.

Single-threaded on purpose; determinism matters more here than core count,
and the shapes are small enough that memory traffic is the real cost.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, sqrt

cnp.import_array()

BACKEND = "c"


def sqdist_matrix(double[:, ::1] S, double[:, ::1] C):
    cdef Py_ssize_t n = S.shape[0], k = C.shape[0], d = S.shape[1]
    cdef Py_ssize_t i, j, m
    cdef double acc, diff
    out_arr = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        for j in range(k):
            acc = 0.0
            for m in range(d):
                diff = S[i, m] - C[j, m]
                acc += diff * diff
            out[i, j] = acc
    return out_arr


def nearest_codeword(double[:, ::1] S, double[:, ::1] C):
    # branch-free inner loop (full distance, compare once per codeword) so
    # the compiler can keep the accumulation in registers
    cdef Py_ssize_t n = S.shape[0], k = C.shape[0], d = S.shape[1]
    cdef Py_ssize_t i, j, m, best
    cdef double acc, diff, bestd
    out_arr = np.empty(n, dtype=np.int64)
    cdef long long[::1] out = out_arr
    for i in range(n):
        best = 0
        bestd = 0.0
        for m in range(d):
            diff = S[i, m] - C[0, m]
            bestd += diff * diff
        for j in range(1, k):
            acc = 0.0
            for m in range(d):
                diff = S[i, m] - C[j, m]
                acc += diff * diff
            if acc < bestd:
                bestd = acc
                best = j
        out[i] = best
    return out_arr


def scatter_add_rows(double[:, ::1] acc, long long[::1] idx, double[:, ::1] rows, weights=None):
    cdef Py_ssize_t n = idx.shape[0], d = rows.shape[1]
    cdef Py_ssize_t i, m
    cdef long long r
    cdef double w
    cdef double[::1] wv
    if weights is None:
        for i in range(n):
            r = idx[i]
            for m in range(d):
                acc[r, m] += rows[i, m]
    else:
        wv = weights
        for i in range(n):
            r = idx[i]
            w = wv[i]
            for m in range(d):
                acc[r, m] += w * rows[i, m]
    return acc


def bag_mean(double[:, ::1] table, long long[::1] ids, long long[::1] offsets, out=None):
    cdef Py_ssize_t n_bags = offsets.shape[0] - 1, d = table.shape[1]
    cdef Py_ssize_t b, m
    cdef long long p, lo, hi
    cdef double inv
    if out is None:
        out = np.empty((n_bags, d), dtype=np.float64)
    cdef double[:, ::1] o = out
    for b in range(n_bags):
        lo = offsets[b]
        hi = offsets[b + 1]
        for m in range(d):
            o[b, m] = 0.0
        for p in range(lo, hi):
            for m in range(d):
                o[b, m] += table[ids[p], m]
        inv = 1.0 / (hi - lo)
        for m in range(d):
            o[b, m] *= inv
    return out


def contrastive_pq(double[:, ::1] S, long long[:, ::1] codes,
                   long long[:, :, ::1] neg, double[:, :, ::1] CW):
    """InfoNCE over cosine similarities between anchors and code
    reconstructions, fused with the codeword gradient.

    Reconstructions are gathered on the fly from (codes, CW) so no (n, T, d)
    temporary is ever materialized. Zero-norm pairs contribute cosine 0 with
    zero gradient. Returns (mean loss, grad w.r.t. CW).
    """
    cdef Py_ssize_t n = S.shape[0], d = S.shape[1]
    cdef Py_ssize_t m = CW.shape[0], k = CW.shape[1], dm = CW.shape[2]
    cdef Py_ssize_t T = neg.shape[1]
    cdef Py_ssize_t i, t, mm, j, base
    cdef long long c
    cdef double sn2, sn, vn2, vn, dot, denom, zmax, ssum, loss, coef, inv_vn2, q
    grad_arr = np.zeros((m, k, dm), dtype=np.float64)
    cdef double[:, :, ::1] grad = grad_arr
    if n == 0:
        return 0.0, grad_arr
    vbuf_arr = np.empty(d, dtype=np.float64)
    cos_arr = np.empty(T + 1, dtype=np.float64)
    ex_arr = np.empty(T + 1, dtype=np.float64)
    vn2_arr = np.empty(T + 1, dtype=np.float64)
    cdef double[::1] vbuf = vbuf_arr
    cdef double[::1] cn = cos_arr
    cdef double[::1] ex = ex_arr
    cdef double[::1] vnorm2 = vn2_arr

    loss = 0.0
    for i in range(n):
        sn2 = 0.0
        for j in range(d):
            sn2 += S[i, j] * S[i, j]
        sn = sqrt(sn2)
        # cosines against the positive (t = 0) and the T negatives
        for t in range(T + 1):
            vn2 = 0.0
            dot = 0.0
            for mm in range(m):
                c = codes[i, mm] if t == 0 else neg[i, t - 1, mm]
                base = mm * dm
                for j in range(dm):
                    q = CW[mm, c, j]
                    vn2 += q * q
                    dot += S[i, base + j] * q
            vnorm2[t] = vn2
            denom = sn * sqrt(vn2)
            cn[t] = dot / denom if denom > 0.0 else 0.0
        zmax = cn[0]
        for t in range(1, T + 1):
            if cn[t] > zmax:
                zmax = cn[t]
        ssum = 0.0
        for t in range(T + 1):
            ex[t] = exp(cn[t] - zmax)
            ssum += ex[t]
        loss += zmax + log(ssum) - cn[0]
        # d(loss)/d(cosine): softmax - onehot(positive), averaged over rows
        for t in range(T + 1):
            coef = ex[t] / ssum
            if t == 0:
                coef -= 1.0
            coef /= n
            vn2 = vnorm2[t]
            if sn * sqrt(vn2) <= 0.0:
                continue
            vn = sqrt(vn2)
            inv_vn2 = 1.0 / vn2
            for mm in range(m):
                c = codes[i, mm] if t == 0 else neg[i, t - 1, mm]
                base = mm * dm
                for j in range(dm):
                    grad[mm, c, j] += coef * (S[i, base + j] / (sn * vn) - cn[t] * CW[mm, c, j] * inv_vn2)
    return loss / n, grad_arr


def entropy_reg_pq(double[:, ::1] S, double[:, :, ::1] CW, double[::1] w,
                   double tau, double eps):
    """Exponentiated negative entropy of the weighted soft code-usage
    distribution, fused with the codeword gradient.

    w must already be normalized to sum 1. One (n, K) buffer per subspace
    carries the row softmax; distances never hit negative values here
    because they are accumulated as explicit squared differences.
    """
    cdef Py_ssize_t n = S.shape[0]
    cdef Py_ssize_t m = CW.shape[0], k = CW.shape[1], dm = CW.shape[2]
    cdef Py_ssize_t i, j, t, v, base
    cdef double acc, diff, zmax, ssum, hh, li, phis, dz, loss
    grad_arr = np.zeros((m, k, dm), dtype=np.float64)
    cdef double[:, :, ::1] grad = grad_arr
    A_arr = np.empty((n, k), dtype=np.float64)
    p_arr = np.empty(k, dtype=np.float64)
    phi_arr = np.empty(k, dtype=np.float64)
    cdef double[:, ::1] A = A_arr
    cdef double[::1] p = p_arr
    cdef double[::1] phi = phi_arr
    loss = 0.0
    for i in range(m):
        base = i * dm
        for j in range(n):
            for t in range(k):
                acc = 0.0
                for v in range(dm):
                    diff = S[j, base + v] - CW[i, t, v]
                    acc += diff * diff
                A[j, t] = -acc / tau
            zmax = A[j, 0]
            for t in range(1, k):
                if A[j, t] > zmax:
                    zmax = A[j, t]
            for t in range(k):
                A[j, t] -= zmax
        # one vectorized exp per subspace; the scalar libc call would
        # dominate this kernel at K in the tens
        np.exp(A_arr, out=A_arr)
        for j in range(n):
            ssum = 0.0
            for t in range(k):
                ssum += A[j, t]
            for t in range(k):
                A[j, t] /= ssum
        for t in range(k):
            p[t] = 0.0
        for j in range(n):
            for t in range(k):
                p[t] += w[j] * A[j, t]
        hh = 0.0
        for t in range(k):
            hh -= p[t] * log(p[t] + eps)
        li = exp(-hh)
        loss += li
        # dL/dp_k, then back through softmax and the squared distances
        for t in range(k):
            phi[t] = (li / m) * (log(p[t] + eps) + p[t] / (p[t] + eps))
        for j in range(n):
            phis = 0.0
            for t in range(k):
                phis += A[j, t] * phi[t]
            for t in range(k):
                if A[j, t] == 0.0:
                    continue
                dz = (-w[j] / tau) * A[j, t] * (phi[t] - phis)
                for v in range(dm):
                    grad[i, t, v] += 2.0 * dz * (CW[i, t, v] - S[j, base + v])
    return loss / m, grad_arr


def bag_mean_backward(double[:, ::1] gout, long long[::1] ids, long long[::1] offsets,
                      Py_ssize_t n_rows, gtable=None):
    cdef Py_ssize_t n_bags = offsets.shape[0] - 1, d = gout.shape[1]
    cdef Py_ssize_t b, m
    cdef long long p, lo, hi, r
    cdef double inv
    if gtable is None:
        gtable = np.zeros((n_rows, d), dtype=np.float64)
    cdef double[:, ::1] g = gtable
    for b in range(n_bags):
        lo = offsets[b]
        hi = offsets[b + 1]
        inv = 1.0 / (hi - lo)
        for p in range(lo, hi):
            r = ids[p]
            for m in range(d):
                g[r, m] += gout[b, m] * inv
    return gtable
