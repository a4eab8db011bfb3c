"""Evaluation metrics: AUC, logloss, code usage statistics.

AUC uses the rank-sum identity with average ranks for ties, so tied
positive/negative pairs earn 0.5 credit and the result is invariant under
strictly monotone score transforms.
"""

import numpy as np

PROB_CLAMP = 1e-7


def tied_ranks(x):
    """1-based ranks; runs of equal values share their average rank."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        return np.empty(0, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    grp = np.cumsum(np.concatenate(([0], (np.diff(sx) != 0).astype(np.int64))))
    sizes = np.bincount(grp)
    first = np.concatenate(([0], np.cumsum(sizes)[:-1]))
    avg = first + (sizes + 1) / 2.0  # average 1-based rank within each tie group
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = avg[grp]
    return ranks


def auc(labels, scores):
    """Area under the ROC curve via the rank-sum formula.

    Raises ValueError when only one class is present (AUC undefined).
    """
    labels = np.asarray(labels, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape:
        raise ValueError(f"labels/scores shape mismatch: {labels.shape} vs {scores.shape}")
    pos = labels == 1.0
    n_pos = int(pos.sum())
    n_neg = labels.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: need both classes present")
    ranks = tied_ranks(scores)
    rank_sum = ranks[pos].sum()
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def logloss(labels, probs):
    """Mean binary cross-entropy with probabilities clamped to
    [1e-7, 1 - 1e-7] before the logs."""
    labels = np.asarray(labels, dtype=np.float64)
    probs = np.clip(np.asarray(probs, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-np.mean(labels * np.log(probs) + (1.0 - labels) * np.log(1.0 - probs)))


def code_distribution(codebook, field=None, subspace=0, top_n=None):
    """Histogram of code usage in one sub-codebook.

    Counts how many features (optionally restricted to one field) map to each
    codeword of the given subspace. Returns (code_ids, counts) sorted by
    count descending, code id ascending as the tiebreak; top_n truncates.
    """
    codes = codebook.codes
    if field is not None:
        try:
            f = codebook.field_names.index(field)
        except ValueError:
            raise ValueError(f"unknown field {field!r}; have {codebook.field_names}") from None
        lo, hi = codebook.field_offsets[f], codebook.field_offsets[f + 1]
        codes = codes[lo:hi]
    if not 0 <= subspace < codebook.n_subspaces:
        raise ValueError(f"subspace {subspace} out of range [0, {codebook.n_subspaces})")
    counts = np.bincount(codes[:, subspace], minlength=codebook.n_codewords)
    code_ids = np.arange(codebook.n_codewords, dtype=np.int64)
    order = np.lexsort((code_ids, -counts))
    code_ids, counts = code_ids[order], counts[order]
    if top_n is not None:
        code_ids, counts = code_ids[:top_n], counts[:top_n]
    return code_ids, counts.astype(np.int64)


def weighted_code_entropy(codebook):
    """Popularity-weighted entropy of hard code usage, averaged over
    subspaces. Natural log; weights are the codebook's popularity weights."""
    w = codebook.weights.astype(np.float64)
    total = w.sum()
    if total <= 0:
        raise ValueError("popularity weights sum to zero")
    ent = 0.0
    for i in range(codebook.n_subspaces):
        p = np.bincount(codebook.codes[:, i], weights=w, minlength=codebook.n_codewords) / total
        nz = p > 0
        ent += float(-(p[nz] * np.log(p[nz])).sum())
    return ent / codebook.n_subspaces
