"""Product quantization of embedding tables with popularity-aware training.

The embedding matrix is cut into M equal sub-vectors; each subspace gets its
own K-codeword codebook. Training alternates hard assignment with gradient
steps on the codewords for a loss of up to three terms:

  recon    weighted squared reconstruction error (weights normalized per batch)
  reg      exp(-H) of the popularity-weighted soft code-usage distribution,
           averaged over subspaces, pushing weighted usage toward uniform
  con      InfoNCE-style contrastive term over cosine similarities between a
           feature vector, its own reconstruction, and reconstructions whose
           codes were randomly corrupted

Soft assignments are softmax(-dist^2 / tau). All gradient functions return
d(loss)/d(codewords) and are exercised against finite differences in the
tests; the trainer consumes exactly these functions.
"""

import time
import math
from dataclasses import dataclass

import numpy as np

from mec import kernels
from mec.errors import ConfigError, ShapeMismatchError
from mec.models import Adam
from mec.seeding import rng_for

DEFAULT_EPSILON = 1e-10


def popularity_weight(counts):
    """Log-bucketed popularity: floor(log2(max(n,1))) + 1.

    Monotone in n, 1 for unseen/rare features, 11 for n=1024; always fits a
    byte for any realistic count.
    """
    n = np.maximum(np.asarray(counts, dtype=np.int64), 1)
    return np.floor(np.log2(n)).astype(np.int64) + 1


def assign(S, C):
    """Hard assignment: index of the nearest codeword per row (ties to the
    lowest index)."""
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    return kernels.nearest_codeword(S, C)


def soft_assign(S, C, tau=1.0):
    """Softmax over negative squared distances / tau, rows sum to 1."""
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    z = -kernels.sqdist_matrix(S, C) / tau
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    e /= e.sum(axis=1, keepdims=True)
    return e


def reconstruct(codes, codewords):
    """Concatenate the selected codeword of every subspace.

    codes: (..., M) integer array; codewords: (M, K, d/M).
    Returns (..., d) in the codewords' dtype.
    """
    codes = np.asarray(codes)
    m, k, dm = codewords.shape
    if codes.shape[-1] != m:
        raise ShapeMismatchError(f"codes have {codes.shape[-1]} subspaces, codewords {m}")
    if codes.min(initial=0) < 0 or codes.max(initial=0) >= k:
        raise ShapeMismatchError(f"code id out of range [0, {k})")
    sel = codewords[np.arange(m), codes]  # (..., M, dm)
    return sel.reshape(codes.shape[:-1] + (m * dm,))


def _norm_weights(weights, n):
    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        return None  # nothing in this batch carries weight
    return w / total


def recon_loss(S, Q, weights=None):
    """Weighted mean squared reconstruction error, weights normalized to
    sum 1 over the batch."""
    S = np.asarray(S, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    w = _norm_weights(weights, S.shape[0])
    if w is None:
        return 0.0
    return float((w * ((S - Q) ** 2).sum(axis=1)).sum())


def recon_loss_and_grad(S, codes, codewords, weights=None):
    """Reconstruction loss plus its gradient w.r.t. the codewords."""
    m, k, dm = codewords.shape
    grad = np.zeros_like(codewords)
    w = _norm_weights(weights, S.shape[0])
    if w is None:
        return 0.0, grad
    loss = 0.0
    for i in range(m):
        Si = np.ascontiguousarray(S[:, i * dm : (i + 1) * dm], dtype=np.float64)
        picked = codewords[i][codes[:, i]]
        diff = picked - Si
        loss += float((w * (diff * diff).sum(axis=1)).sum())
        kernels.scatter_add_rows(grad[i], codes[:, i], diff, 2.0 * w)
    return loss, grad


def usage_distribution(soft, weights=None):
    """Popularity-weighted mean of soft assignments: p_k = sum_j w_j A_jk / sum_j w_j."""
    soft = np.asarray(soft, dtype=np.float64)
    w = _norm_weights(weights, soft.shape[0])
    if w is None:
        raise ConfigError("usage_distribution needs positive total weight")
    return np.tensordot(w, soft, axes=(0, 0))


def reg_loss(soft, weights=None, eps=DEFAULT_EPSILON):
    """exp(-entropy) of the weighted usage distribution, averaged over
    subspaces.

    soft: (n, K) for a single subspace or (n, M, K). Bounded in
    (1/K, 1] up to the epsilon inside the log.
    """
    soft = np.asarray(soft, dtype=np.float64)
    single = soft.ndim == 2
    if single:
        soft = soft[:, None, :]
    p = usage_distribution(soft, weights)  # (M, K)
    h = -(p * np.log(p + eps)).sum(axis=1)
    return float(np.exp(-h).mean())


def reg_loss_and_grad(S, codewords, weights=None, tau=1.0, eps=DEFAULT_EPSILON):
    """Entropy regularizer and its gradient w.r.t. the codewords.

    Recomputes soft assignments from S internally so the whole chain
    (distances -> softmax -> weighted usage -> entropy) is differentiated.
    Runs once per training batch, so the fused kernel carries the math.
    """
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    w = _norm_weights(weights, S.shape[0])
    if w is None:
        return 0.0, np.zeros_like(codewords)
    return kernels.entropy_reg_pq(np.asarray(S, dtype=np.float64), codewords, w, tau, eps)


def sample_negative(codes, rho, k, rng):
    """Corrupt each code independently with probability rho, replacing it by
    a uniform draw from {0..K-1} (which may repeat the original)."""
    if not 0.0 <= rho <= 1.0:
        raise ConfigError(f"rho must be in [0, 1], got {rho}")
    codes = np.asarray(codes)
    mask = rng.random(codes.shape) < rho
    repl = rng.integers(0, k, size=codes.shape)
    return np.where(mask, repl, codes)


def _cosine_rows(U, V):
    """Row-wise cosine similarity; rows with zero norm give 0."""
    un = np.linalg.norm(U, axis=-1)
    vn = np.linalg.norm(V, axis=-1)
    dot = (U * V).sum(axis=-1)
    denom = un * vn
    out = np.zeros_like(dot)
    ok = denom > 0
    out[ok] = dot[ok] / denom[ok]
    return out


def contrastive_loss(anchors, positives, negatives):
    """Mean InfoNCE over cosine similarities.

    anchors (n, d), positives (n, d), negatives (n, T, d); the positive's
    similarity competes against the T negatives in a softmax.
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    pos = np.asarray(positives, dtype=np.float64)
    neg = np.asarray(negatives, dtype=np.float64)
    l_pos = _cosine_rows(anchors, pos)[:, None]
    l_neg = _cosine_rows(anchors[:, None, :], neg)
    logits = np.concatenate([l_pos, l_neg], axis=1)
    zmax = logits.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(logits - zmax).sum(axis=1))
    return float(np.mean(lse - logits[:, 0]))


def contrastive_loss_and_grad(S, codes, neg_codes, codewords):
    """Contrastive loss with gradients w.r.t. the codewords.

    Positives are the anchors' own reconstructions, negatives reconstructions
    of corrupted codes; anchors are treated as constants. The heavy lifting
    happens in the kernel backend, which fuses the reconstruction gather with
    the cosine/softmax chain.
    """
    return kernels.contrastive_pq(S, codes, neg_codes, codewords)


def kmeans_pp_init(X, k, rng):
    """k-means++ seeding: iteratively sample points proportional to their
    squared distance from the chosen set."""
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]), dtype=np.float64)
    first = int(rng.integers(0, n))
    centers[0] = X[first]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            probs = d2 / total
            idx = int(rng.choice(n, p=probs))
        else:
            idx = int(rng.integers(0, n))  # all points covered; arbitrary
        centers[j] = X[idx]
        d2 = np.minimum(d2, ((X - centers[j]) ** 2).sum(axis=1))
    return centers


@dataclass
class QuantizerSettings:
    """Hyper-parameters for codebook training."""

    M: int
    K: int
    tau: float = 1.0
    rho: float = 0.3
    epsilon: float = DEFAULT_EPSILON
    n_negatives: int = 8
    epochs: int = 15
    batch_size: int = 8192
    lr: float = 0.05
    update_rule: str = "adam"  # adam | centroid
    init_sample: int = 4096
    reg_sample: int = 512

    def validate(self, d):
        if self.M < 1 or self.K < 1:
            raise ConfigError(f"M and K must be >= 1, got M={self.M} K={self.K}")
        if d % self.M != 0:
            raise ConfigError(f"d mod M != 0 (d={d}, M={self.M})")
        if self.update_rule not in ("adam", "centroid"):
            raise ConfigError(f"update_rule must be adam or centroid, got {self.update_rule!r}")
        if self.tau <= 0 or not 0 <= self.rho <= 1 or self.epsilon <= 0:
            raise ConfigError("need tau > 0, 0 <= rho <= 1, epsilon > 0")
        if self.n_negatives < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("n_negatives, epochs and batch_size must be >= 1")
        if self.init_sample < self.K:
            raise ConfigError(f"init_sample must be >= K ({self.init_sample} < {self.K})")


class Codebook:
    """Trained product-quantization artifact.

    codewords: (M, K, d/M) float32; codes: (n_features, M) hard assignments;
    weights: per-feature popularity weights (log-bucketed counts, fit a
    byte); field_offsets map each field's local ids into the global rows.
    """

    def __init__(self, field_names, field_offsets, codewords, codes, weights):
        self.field_names = list(field_names)
        self.field_offsets = np.asarray(field_offsets, dtype=np.int64)
        self.codewords = np.ascontiguousarray(codewords, dtype=np.float32)
        self.codes = np.ascontiguousarray(codes, dtype=np.int64)
        self.weights = np.ascontiguousarray(weights, dtype=np.uint8)
        m, k, dm = self.codewords.shape
        g = self.codes.shape[0]
        if self.field_offsets[0] != 0 or self.field_offsets[-1] != g:
            raise ShapeMismatchError("field offsets do not cover the feature rows")
        if len(self.field_names) != len(self.field_offsets) - 1:
            raise ShapeMismatchError("field names and offsets disagree")
        if self.codes.shape[1] != m:
            raise ShapeMismatchError("codes and codewords disagree on M")
        if g and (self.codes.min() < 0 or self.codes.max() >= k):
            raise ShapeMismatchError(f"code id out of range [0, {k})")
        if self.weights.shape[0] != g:
            raise ShapeMismatchError("weights length does not match feature rows")

    @property
    def n_subspaces(self):
        return int(self.codewords.shape[0])

    @property
    def n_codewords(self):
        return int(self.codewords.shape[1])

    @property
    def sub_dim(self):
        return int(self.codewords.shape[2])

    @property
    def dim(self):
        return self.n_subspaces * self.sub_dim

    @property
    def n_features(self):
        return int(self.codes.shape[0])

    def reconstruct_rows(self, gids=None):
        """Reconstructed embedding rows for the given global ids (all rows
        when omitted)."""
        codes = self.codes if gids is None else self.codes[np.asarray(gids)]
        return reconstruct(codes, self.codewords)

    def __eq__(self, other):
        if not isinstance(other, Codebook):
            return NotImplemented
        return (
            self.field_names == other.field_names
            and np.array_equal(self.field_offsets, other.field_offsets)
            and np.array_equal(self.codewords, other.codewords)
            and np.array_equal(self.codes, other.codes)
            and np.array_equal(self.weights, other.weights)
        )


def _assign_all(S, codewords, chunk=16384):
    """Hard-assign every row, chunked, in index order."""
    m, _, dm = codewords.shape
    n = S.shape[0]
    codes = np.empty((n, m), dtype=np.int64)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        for i in range(m):
            Si = np.ascontiguousarray(S[lo:hi, i * dm : (i + 1) * dm])
            codes[lo:hi, i] = kernels.nearest_codeword(Si, codewords[i])
    return codes


def train_codebooks(embeddings, weights, settings, seed, alpha=0.0, beta=0.0):
    """Learn per-subspace codebooks by alternating hard assignment with
    updates on the codewords.

    embeddings: (n_features, d) frozen stage-1 vectors; weights: per-feature
    training weights (None means uniform; the regularizer reuses the same
    weights). Returns (codewords (M,K,d/M) float64, codes (n_features, M),
    trace), trace holding one dict per epoch with the loss terms (disabled
    terms report 0) and the number of unused codewords seen that epoch.
    """
    S = np.ascontiguousarray(embeddings, dtype=np.float64)
    n, d = S.shape
    settings.validate(d)
    m, k = settings.M, settings.K
    dm = d // m
    if settings.update_rule == "centroid" and (alpha != 0.0 or beta != 0.0):
        raise ConfigError("centroid updates support alpha=beta=0 only")
    if beta > 0.0 and not 0.0 < settings.rho < 1.0:
        raise ConfigError(f"rho must be in (0, 1) when the contrastive term is on, got {settings.rho}")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape[0] != n:
        raise ShapeMismatchError("weights length does not match embeddings")

    rng = rng_for(seed, "quantizer")
    # init: k-means++ on a weight-proportional sample
    wsum = w.sum()
    p = w / wsum if wsum > 0 else np.full(n, 1.0 / n)
    sample_idx = rng.choice(n, size=min(int(settings.init_sample), n), replace=True, p=p)
    codewords = np.empty((m, k, dm))
    for i in range(m):
        Xi = np.ascontiguousarray(S[sample_idx, i * dm : (i + 1) * dm])
        codewords[i] = kmeans_pp_init(Xi, k, rng)

    params = {"codewords": codewords}
    opt = Adam(params, lr=settings.lr) if settings.update_rule == "adam" else None
    trace = []
    for epoch in range(int(settings.epochs)):
        t0 = time.perf_counter()
        if settings.update_rule == "centroid":
            codes = _assign_all(S, codewords)
            recon = recon_loss(S, reconstruct(codes, codewords), w)
            used = 0
            for i in range(m):
                sums = np.zeros((k, dm))
                kernels.scatter_add_rows(sums, codes[:, i], np.ascontiguousarray(S[:, i * dm : (i + 1) * dm]), w)
                mass = np.bincount(codes[:, i], weights=w, minlength=k)
                nz = mass > 0
                codewords[i][nz] = sums[nz] / mass[nz, None]
                used += int(nz.sum())
            trace.append(
                {
                    "recon": recon,
                    "reg": 0.0,
                    "con": 0.0,
                    "total": recon,
                    "empty_codes": m * k - used,
                    "seconds": time.perf_counter() - t0,
                }
            )
            continue

        perm = rng.permutation(n)
        usage = np.zeros((m, k), dtype=np.int64)
        recon_num = reg_sum = con_sum = 0.0
        recon_den = 0.0
        n_batches = 0
        for lo in range(0, n, int(settings.batch_size)):
            idx = perm[lo : lo + int(settings.batch_size)]
            Sb = S[idx]
            wb = w[idx]
            codes_b = _assign_all(Sb, codewords, chunk=Sb.shape[0])
            for i in range(m):
                usage[i] += np.bincount(codes_b[:, i], minlength=k)
            loss_r, grads = recon_loss_and_grad(Sb, codes_b, codewords, wb)
            loss_reg = loss_con = 0.0
            if alpha > 0.0:
                ss = min(int(settings.reg_sample), Sb.shape[0])
                loss_reg, g_reg = reg_loss_and_grad(Sb[:ss], codewords, wb[:ss], settings.tau, settings.epsilon)
                grads += alpha * g_reg
            if beta > 0.0:
                neg_codes = sample_negative(
                    np.repeat(codes_b[:, None, :], settings.n_negatives, axis=1), settings.rho, k, rng
                )
                loss_con, g_con = contrastive_loss_and_grad(Sb, codes_b, neg_codes, codewords)
                grads += beta * g_con
            opt.step(params, {"codewords": grads})
            bw = wb.sum()
            recon_num += loss_r * bw
            recon_den += bw
            reg_sum += loss_reg
            con_sum += loss_con
            n_batches += 1
        recon = recon_num / recon_den if recon_den > 0 else 0.0
        reg = reg_sum / n_batches
        con = con_sum / n_batches
        trace.append(
            {
                "recon": float(recon),
                "reg": float(reg),
                "con": float(con),
                "total": float(recon + alpha * reg + beta * con),
                "empty_codes": int(m * k - np.count_nonzero(usage)),
                "seconds": time.perf_counter() - t0,
            }
        )

    codes = _assign_all(S, codewords)
    return codewords, codes, trace
