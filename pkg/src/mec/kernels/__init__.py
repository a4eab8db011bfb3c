"""Kernel backend selection.

Tries the compiled extension first and falls back to numpy. Override with
MEC_KERNELS=c (fail if missing), MEC_KERNELS=py, or MEC_KERNELS=auto.
All entry points validate/contiguize inputs once here so both backends can
assume float64/int64 C-contiguous arrays.
"""

import os

import numpy as np

from mec.kernels import _pykernels

_choice = os.environ.get("MEC_KERNELS", "auto").lower()
if _choice not in ("auto", "c", "py"):
    raise ValueError(f"MEC_KERNELS must be auto, c or py, got {_choice!r}")

_impl = _pykernels
if _choice in ("auto", "c"):
    try:
        from mec.kernels import _ckernels

        _impl = _ckernels
    except ImportError:
        if _choice == "c":
            raise
BACKEND = _impl.BACKEND


def active_backend() -> str:
    """'c' when the compiled extension is in use, else 'py'."""
    return BACKEND


def _f8(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _i8(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def sqdist_matrix(S, C):
    S, C = _f8(S), _f8(C)
    if S.shape[1] != C.shape[1]:
        raise ValueError(f"dim mismatch: {S.shape[1]} vs {C.shape[1]}")
    return np.asarray(_impl.sqdist_matrix(S, C))


def nearest_codeword(S, C):
    S, C = _f8(S), _f8(C)
    if S.shape[1] != C.shape[1]:
        raise ValueError(f"dim mismatch: {S.shape[1]} vs {C.shape[1]}")
    if C.shape[0] < 1:
        raise ValueError("need at least one codeword")
    return np.asarray(_impl.nearest_codeword(S, C))


def scatter_add_rows(acc, idx, rows, weights=None):
    idx = _i8(idx)
    rows = _f8(rows)
    if weights is not None:
        weights = _f8(weights)
    if not (acc.dtype == np.float64 and acc.flags.c_contiguous):
        raise ValueError("acc must be a C-contiguous float64 array")
    return np.asarray(_impl.scatter_add_rows(acc, idx, rows, weights))


def contrastive_pq(S, codes, neg_codes, codewords):
    S = _f8(S)
    codes = _i8(codes)
    neg_codes = _i8(neg_codes)
    codewords = _f8(codewords)
    m, k, dm = codewords.shape
    n, d = S.shape
    if d != m * dm:
        raise ValueError(f"dim mismatch: anchors have {d} dims, codewords give {m * dm}")
    if codes.shape != (n, m) or neg_codes.shape[0] != n or neg_codes.shape[2] != m:
        raise ValueError("codes/negatives do not match anchors")
    if n > 0 and (
        codes.min() < 0 or codes.max() >= k or neg_codes.min() < 0 or neg_codes.max() >= k
    ):
        raise ValueError(f"code ids out of range [0, {k})")
    loss, grad = _impl.contrastive_pq(S, codes, neg_codes, codewords)
    return float(loss), np.asarray(grad)


def entropy_reg_pq(S, codewords, weights, tau, eps):
    S, CW, w = _f8(S), _f8(codewords), _f8(weights)
    m, k, dm = CW.shape
    if S.shape[1] != m * dm:
        raise ValueError(f"dim mismatch: rows have {S.shape[1]} dims, codewords give {m * dm}")
    if w.shape != (S.shape[0],):
        raise ValueError("weights do not match rows")
    if tau <= 0.0:
        raise ValueError(f"tau must be positive, got {tau}")
    loss, grad = _impl.entropy_reg_pq(S, CW, w, float(tau), float(eps))
    return float(loss), np.asarray(grad)


def bag_mean(table, ids, offsets, out=None):
    table, ids, offsets = _f8(table), _i8(ids), _i8(offsets)
    if offsets[-1] != ids.shape[0]:
        raise ValueError("offsets[-1] must equal len(ids)")
    if np.any(np.diff(offsets) <= 0):
        raise ValueError("empty bags are not allowed")
    return np.asarray(_impl.bag_mean(table, ids, offsets, out))


def bag_mean_backward(gout, ids, offsets, n_rows, gtable=None):
    gout, ids, offsets = _f8(gout), _i8(ids), _i8(offsets)
    return np.asarray(_impl.bag_mean_backward(gout, ids, offsets, int(n_rows), gtable))
