"""Pure-numpy kernel backend.

Same contracts as the compiled extension; used when the extension is not
built or when MEC_KERNELS=py forces it. Scatter-style accumulations go
through a stable argsort + reduceat instead of np.add.at, which is far
slower, and stay deterministic because the reduction order is fixed.
"""

import numpy as np

BACKEND = "py"


def sqdist_matrix(S, C):
    """All-pairs squared euclidean distances, shape (n, K)."""
    d2 = (S * S).sum(axis=1)[:, None] - 2.0 * (S @ C.T) + (C * C).sum(axis=1)[None, :]
    np.maximum(d2, 0.0, out=d2)
    return d2


def nearest_codeword(S, C):
    """Index of the closest codeword per row; ties go to the lowest index."""
    out = np.empty(S.shape[0], dtype=np.int64)
    # chunked so the distance matrix never gets large
    step = max(1, 8192 * 64 // max(1, C.shape[0]))
    for lo in range(0, S.shape[0], step):
        hi = min(lo + step, S.shape[0])
        out[lo:hi] = np.argmin(sqdist_matrix(S[lo:hi], C), axis=1)
    return out


def scatter_add_rows(acc, idx, rows, weights=None):
    """acc[idx[i]] += weights[i] * rows[i], accumulated in index order."""
    if idx.shape[0] == 0:
        return acc
    if weights is not None:
        rows = rows * weights[:, None]
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    srows = rows[order]
    cut = np.flatnonzero(np.diff(sidx)) + 1
    starts = np.concatenate(([0], cut))
    sums = np.add.reduceat(srows, starts, axis=0)
    acc[sidx[starts]] += sums
    return acc


def _cosine_rows(U, V):
    un = np.linalg.norm(U, axis=-1)
    vn = np.linalg.norm(V, axis=-1)
    dot = (U * V).sum(axis=-1)
    denom = un * vn
    out = np.zeros_like(dot)
    ok = denom > 0
    out[ok] = dot[ok] / denom[ok]
    return out


def _dcos_dv(anchors, V, cos, scale):
    an = np.linalg.norm(anchors, axis=-1)
    vn = np.linalg.norm(V, axis=-1)
    ok = (an * vn) > 0
    safe_an = np.where(ok, an, 1.0)
    safe_vn = np.where(ok, vn, 1.0)
    g = anchors / (safe_an * safe_vn)[..., None] - (cos / (safe_vn * safe_vn))[..., None] * V
    g *= np.where(ok, scale, 0.0)[..., None]
    return g


def _gather_codes(codes, CW):
    m, _, dm = CW.shape
    parts = [CW[i][codes[..., i]] for i in range(m)]
    return np.concatenate(parts, axis=-1)


def contrastive_pq(S, codes, neg, CW):
    """InfoNCE over cosine similarities between anchors and code
    reconstructions, with the gradient w.r.t. the codewords.

    Positives are the anchors' own reconstructions, negatives come from the
    corrupted codes. Zero-norm pairs contribute cosine 0 with zero gradient.
    """
    m, k, dm = CW.shape
    n, T = neg.shape[0], neg.shape[1]
    grad = np.zeros_like(CW)
    if n == 0:
        return 0.0, grad
    Q = _gather_codes(codes, CW)  # (n, d)
    Z = _gather_codes(neg, CW)  # (n, T, d)
    l_pos = _cosine_rows(S, Q)
    l_neg = _cosine_rows(S[:, None, :], Z)
    logits = np.concatenate([l_pos[:, None], l_neg], axis=1)
    zmax = logits.max(axis=1, keepdims=True)
    expz = np.exp(logits - zmax)
    sm = expz / expz.sum(axis=1, keepdims=True)
    loss = float(np.mean((zmax[:, 0] + np.log(expz.sum(axis=1))) - logits[:, 0]))

    dV_pos = _dcos_dv(S, Q, l_pos, (sm[:, 0] - 1.0) / n)
    dV_neg = _dcos_dv(S[:, None, :], Z, l_neg, sm[:, 1:] / n)
    for i in range(m):
        blk = slice(i * dm, (i + 1) * dm)
        scatter_add_rows(grad[i], codes[:, i], np.ascontiguousarray(dV_pos[:, blk]))
        scatter_add_rows(
            grad[i],
            neg[:, :, i].reshape(-1),
            np.ascontiguousarray(dV_neg[:, :, blk].reshape(n * T, dm)),
        )
    return loss, grad


def entropy_reg_pq(S, CW, w, tau, eps):
    """Exponentiated negative entropy of the weighted soft code-usage
    distribution, with the gradient w.r.t. the codewords.

    w must already be normalized to sum 1. The (M, n, K) buffer is reused
    through distances -> softmax -> dz so every contraction stays a batched
    matmul instead of a per-subspace round trip.
    """
    m, k, dm = CW.shape
    Sv = np.ascontiguousarray(S.reshape(S.shape[0], m, dm).transpose(1, 0, 2))
    A = np.matmul(Sv, CW.transpose(0, 2, 1))
    A *= -2.0
    A += (Sv * Sv).sum(axis=2)[:, :, None]
    A += (CW * CW).sum(axis=2)[:, None, :]
    np.maximum(A, 0.0, out=A)  # squared distances
    A *= -1.0 / tau
    A -= A.max(axis=2, keepdims=True)
    np.exp(A, out=A)
    A /= A.sum(axis=2, keepdims=True)  # soft assignments (M, n, K)
    p = np.matmul(w, A)  # (M, K)
    h = -(p * np.log(p + eps)).sum(axis=1)  # (M,)
    li = np.exp(-h)
    loss = float(li.mean())
    # dL/dp_k, then back through softmax and the squared distances
    phi = (li / m)[:, None] * (np.log(p + eps) + p / (p + eps))  # (M, K)
    dD = phi[:, None, :] - np.matmul(A, phi[:, :, None])
    dD *= A
    dD *= w[:, None]  # now dL/dz, z = -D/tau
    dD *= -1.0 / tau
    col = dD.sum(axis=1)  # (M, K)
    grad = CW * col[:, :, None]
    grad -= np.matmul(dD.transpose(0, 2, 1), Sv)
    grad *= 2.0
    return loss, grad


def bag_mean(table, ids, offsets, out=None):
    """Mean-pool table rows per bag: out[b] = mean(table[ids[offsets[b]:offsets[b+1]]]).

    Bags must be non-empty and offsets[-1] == len(ids).
    """
    n_bags = offsets.shape[0] - 1
    if out is None:
        out = np.empty((n_bags, table.shape[1]), dtype=table.dtype)
    counts = np.diff(offsets)
    gathered = table[ids]
    sums = np.add.reduceat(gathered, offsets[:-1], axis=0)
    np.divide(sums, counts[:, None], out=out)
    return out


def bag_mean_backward(gout, ids, offsets, n_rows, gtable=None):
    """Accumulate d(bag_mean)/d(table) into a dense (n_rows, d) array."""
    if gtable is None:
        gtable = np.zeros((n_rows, gout.shape[1]), dtype=gout.dtype)
    counts = np.diff(offsets)
    grows = np.repeat(gout / counts[:, None], counts, axis=0)
    scatter_add_rows(gtable, ids, grows)
    return gtable
