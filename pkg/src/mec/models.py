"""CTR model core: embedding lookup, four small model variants, Adam, training.

Variants share one parameter-dict convention so the optimizer and the
finite-difference tests can treat any model as a flat set of named float64
arrays:

    bias            (1,)            LR / FM / DeepFM-lite
    lin/<field>     (v_field,)      per-feature scalar weights, mean-pooled
    lin_num         (n_numeric,)    linear weights on transformed numerics
    num_w/<name>    (d,)            numeric affine map to embedding space
    num_b/<name>    (d,)
    emb/<field>     (v_field, d)    dense embedding source only
    codewords       (M, K, d/M)     codebook embedding source only
    mlp/W<l>, mlp/b<l>              DeepFM-lite / PNN-lite

Multi-token bags are mean-pooled. Numeric fields enter the interaction part
through a per-field affine map x -> x*w + b. The binary cross-entropy
gradient w.r.t. the logit is (p - y), with probabilities clamped only inside
the log terms of the loss itself.
"""

import time
from dataclasses import dataclass

import numpy as np

from mec import kernels
from mec.data import EncodedDataset
from mec.errors import ConfigError, TrainingDivergedError
from mec.metrics import PROB_CLAMP, auc, logloss
from mec.seeding import rng_for

MODEL_VARIANTS = ("LR", "FM", "DeepFM-lite", "PNN-lite")
LOGIT_CLAMP = 30.0


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -LOGIT_CLAMP, LOGIT_CLAMP)))


def bce(labels, probs):
    """Mean binary cross-entropy; probabilities clamped to [1e-7, 1-1e-7]."""
    p = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-np.mean(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p)))


def he_uniform(rng, fan_in, shape):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class DenseEmbeddingSource:
    """One trainable (v_field, d) table per categorical field."""

    kind = "dense"

    def __init__(self, field_names, tables):
        self.field_names = list(field_names)
        self.tables = [np.ascontiguousarray(t, dtype=np.float64) for t in tables]
        d = {t.shape[1] for t in self.tables}
        if len(d) > 1:
            raise ConfigError(f"inconsistent embedding dims across fields: {sorted(d)}")

    @classmethod
    def fresh(cls, rng, field_names, field_sizes, d):
        limit = 1.0 / np.sqrt(d)
        tables = [rng.uniform(-limit, limit, size=(v, d)) for v in field_sizes]
        return cls(field_names, tables)

    def param_entries(self):
        return {f"emb/{name}": t for name, t in zip(self.field_names, self.tables)}

    def rebind(self, params):
        self.tables = [params[f"emb/{name}"] for name in self.field_names]

    def lookup(self, f, ids, offsets):
        if offsets is None:
            return self.tables[f][ids]
        return kernels.bag_mean(self.tables[f], ids, offsets)

    def backward(self, f, ids, offsets, gout, grads):
        key = f"emb/{self.field_names[f]}"
        if offsets is None:
            kernels.scatter_add_rows(grads[key], ids, gout)
        else:
            kernels.bag_mean_backward(gout, ids, offsets, self.tables[f].shape[0], grads[key])


class CodebookEmbeddingSource:
    """Embeddings reconstructed from frozen code assignments.

    Feature j's vector is the concatenation over subspaces m of
    codewords[m, codes[j, m]]; the codewords are the trainable parameter,
    the assignment table never changes during stage-2 training.
    """

    kind = "codebook"

    def __init__(self, field_names, field_offsets, codes, codewords):
        self.field_names = list(field_names)
        self.field_offsets = np.asarray(field_offsets, dtype=np.int64)
        self.codes = np.ascontiguousarray(codes, dtype=np.int64)
        self.codewords = np.ascontiguousarray(codewords, dtype=np.float64)
        m, k, dm = self.codewords.shape
        if self.codes.shape[1] != m:
            raise ConfigError(f"codes have {self.codes.shape[1]} subspaces, codewords {m}")
        if self.codes.max(initial=0) >= k:
            raise ConfigError("code id out of range for codebook size")

    @property
    def n_subspaces(self):
        return self.codewords.shape[0]

    def param_entries(self):
        return {"codewords": self.codewords}

    def rebind(self, params):
        self.codewords = params["codewords"]

    def feature_rows(self, gids):
        m, _, dm = self.codewords.shape
        sel = self.codewords[np.arange(m)[None, :], self.codes[gids]]  # (n, m, dm)
        return np.ascontiguousarray(sel.reshape(gids.shape[0], m * dm))

    def lookup(self, f, ids, offsets):
        rows = self.feature_rows(ids + self.field_offsets[f])
        if offsets is None:
            return rows
        return kernels.bag_mean(rows, np.arange(rows.shape[0]), offsets)

    def backward(self, f, ids, offsets, gout, grads):
        gids = ids + self.field_offsets[f]
        if offsets is None:
            grows = gout
        else:
            counts = np.diff(offsets)
            grows = np.repeat(gout / counts[:, None], counts, axis=0)
        m, _, dm = self.codewords.shape
        codes_g = self.codes[gids]
        gcw = grads["codewords"]
        for i in range(m):
            kernels.scatter_add_rows(gcw[i], codes_g[:, i], np.ascontiguousarray(grows[:, i * dm : (i + 1) * dm]))


@dataclass
class EmbeddingTable:
    """Stage-1 export: dense per-field tables plus the numeric affine maps."""

    field_names: list
    tables: list
    numeric_names: list
    numeric_weights: np.ndarray  # (n_numeric, d)
    numeric_biases: np.ndarray  # (n_numeric, d)

    @property
    def dim(self):
        return int(self.tables[0].shape[1]) if self.tables else int(self.numeric_weights.shape[1])


class CtrModel:
    """A small CTR predictor over categorical bags and numeric values."""

    def __init__(self, variant, field_names, field_sizes, numeric_names, d, source=None, mlp_layers=(64, 32)):
        if variant not in MODEL_VARIANTS:
            raise ConfigError(f"unknown model variant {variant!r}; expected one of {MODEL_VARIANTS}")
        self.variant = variant
        self.field_names = list(field_names)
        self.field_sizes = [int(v) for v in field_sizes]
        self.numeric_names = list(numeric_names)
        self.d = int(d)
        self.mlp_layers = tuple(int(x) for x in mlp_layers)
        self.source = source
        self.params = {}
        if variant != "LR" and source is None:
            raise ConfigError(f"{variant} needs an embedding source")

    # number of vector-valued fields entering the interaction part
    @property
    def n_vec_fields(self):
        return len(self.field_names) + len(self.numeric_names)

    @property
    def uses_embeddings(self):
        return self.variant != "LR"

    @property
    def uses_mlp(self):
        return self.variant in ("DeepFM-lite", "PNN-lite")

    @property
    def uses_linear(self):
        return self.variant in ("LR", "FM", "DeepFM-lite")

    def mlp_input_dim(self):
        n = self.n_vec_fields
        base = n * self.d
        if self.variant == "PNN-lite":
            base += n * (n - 1) // 2
        return base

    def init_params(self, rng):
        """Fresh non-embedding parameters; embedding arrays come from the source."""
        p = {}
        if self.uses_linear:
            p["bias"] = np.zeros(1)
            for name, v in zip(self.field_names, self.field_sizes):
                p[f"lin/{name}"] = np.zeros(v)
            p["lin_num"] = np.zeros(len(self.numeric_names))
        if self.uses_embeddings:
            limit = 1.0 / np.sqrt(self.d)
            for name in self.numeric_names:
                p[f"num_w/{name}"] = rng.uniform(-limit, limit, size=self.d)
                p[f"num_b/{name}"] = np.zeros(self.d)
            p.update(self.source.param_entries())
        if self.uses_mlp:
            dims = (self.mlp_input_dim(),) + self.mlp_layers + (1,)
            for l in range(len(dims) - 1):
                p[f"mlp/W{l}"] = he_uniform(rng, dims[l], (dims[l], dims[l + 1]))
                p[f"mlp/b{l}"] = np.zeros(dims[l + 1])
        self.params = p
        self._rebind()
        return p

    def set_params(self, params):
        self.params = params
        self._rebind()

    def _rebind(self):
        if self.uses_embeddings:
            self.source.rebind(self.params)

    def snapshot(self):
        return {k: v.copy() for k, v in self.params.items()}

    # ---------------- forward ----------------

    def _field_matrix(self, batch):
        """Stack per-field pooled embeddings into (B, n_vec_fields, d)."""
        B = batch.n_records
        e = np.empty((B, self.n_vec_fields, self.d))
        for f in range(len(self.field_names)):
            e[:, f, :] = self.source.lookup(f, batch.cat_ids[f], batch.cat_offsets[f])
        for a, name in enumerate(self.numeric_names):
            x = batch.numeric[:, a]
            e[:, len(self.field_names) + a, :] = x[:, None] * self.params[f"num_w/{name}"] + self.params[f"num_b/{name}"]
        return e

    def _linear_logit(self, batch):
        B = batch.n_records
        z = np.full(B, self.params["bias"][0])
        for f, name in enumerate(self.field_names):
            w = self.params[f"lin/{name}"]
            ids, off = batch.cat_ids[f], batch.cat_offsets[f]
            if off is None:
                z += w[ids]
            else:
                z += kernels.bag_mean(w[:, None], ids, off)[:, 0]
        if self.numeric_names:
            z += batch.numeric @ self.params["lin_num"]
        return z

    def _mlp_forward(self, z0):
        zs, hs = [], [z0]
        h = z0
        n_layers = len(self.mlp_layers) + 1
        for l in range(n_layers):
            z = h @ self.params[f"mlp/W{l}"] + self.params[f"mlp/b{l}"]
            zs.append(z)
            h = np.maximum(z, 0.0) if l < n_layers - 1 else z
            hs.append(h)
        return zs, hs

    def forward_batch(self, batch):
        """Returns (probs, cache); cache feeds backward_batch."""
        cache = {"batch": batch}
        B = batch.n_records
        logit = np.zeros(B)
        if self.uses_linear:
            logit += self._linear_logit(batch)
        if self.uses_embeddings:
            e = self._field_matrix(batch)
            cache["e"] = e
            if self.variant in ("FM", "DeepFM-lite"):
                S = e.sum(axis=1)
                cache["S"] = S
                logit += 0.5 * ((S * S).sum(axis=1) - (e * e).sum(axis=(1, 2)))
            if self.variant == "DeepFM-lite":
                z0 = e.reshape(B, -1)
            elif self.variant == "PNN-lite":
                iu, ju = np.triu_indices(self.n_vec_fields, k=1)
                cache["pair_idx"] = (iu, ju)
                pairs = np.einsum("bid,bid->bi", e[:, iu, :], e[:, ju, :])
                z0 = np.concatenate([e.reshape(B, -1), pairs], axis=1)
            if self.uses_mlp:
                zs, hs = self._mlp_forward(z0)
                cache["mlp"] = (zs, hs)
                logit += hs[-1][:, 0]
        cache["logit"] = logit
        probs = sigmoid(logit)
        cache["probs"] = probs
        return probs, cache

    def predict(self, dataset, batch_size=8192):
        out = np.empty(dataset.n_records)
        for lo in range(0, dataset.n_records, batch_size):
            hi = min(lo + batch_size, dataset.n_records)
            probs, _ = self.forward_batch(dataset.gather(np.arange(lo, hi)))
            out[lo:hi] = probs
        return out

    # ---------------- backward ----------------

    def zero_grads(self):
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def backward_batch(self, cache, labels, grads=None):
        """Gradients of mean BCE over the batch w.r.t. every parameter."""
        batch = cache["batch"]
        B = batch.n_records
        if grads is None:
            grads = self.zero_grads()
        dlogit = (cache["probs"] - labels) / B

        if self.uses_linear:
            grads["bias"][0] += dlogit.sum()
            for f, name in enumerate(self.field_names):
                ids, off = batch.cat_ids[f], batch.cat_offsets[f]
                key = f"lin/{name}"
                if off is None:
                    grads[key] += np.bincount(ids, weights=dlogit, minlength=self.field_sizes[f])
                else:
                    kernels.bag_mean_backward(dlogit[:, None], ids, off, self.field_sizes[f], grads[key][:, None])
            if self.numeric_names:
                grads["lin_num"] += batch.numeric.T @ dlogit

        if self.uses_embeddings:
            e = cache["e"]
            de = np.zeros_like(e)
            if self.variant in ("FM", "DeepFM-lite"):
                de += dlogit[:, None, None] * (cache["S"][:, None, :] - e)
            if self.uses_mlp:
                zs, hs = cache["mlp"]
                n_layers = len(self.mlp_layers) + 1
                dh = dlogit[:, None]  # d loss / d final activation
                for l in reversed(range(n_layers)):
                    dz = dh if l == n_layers - 1 else dh * (zs[l] > 0)
                    grads[f"mlp/W{l}"] += hs[l].T @ dz
                    grads[f"mlp/b{l}"] += dz.sum(axis=0)
                    dh = dz @ self.params[f"mlp/W{l}"].T
                dz0 = dh
                nf, d = self.n_vec_fields, self.d
                if self.variant == "PNN-lite":
                    iu, ju = cache["pair_idx"]
                    dpairs = dz0[:, nf * d :]
                    de += dz0[:, : nf * d].reshape(B, nf, d)
                    G = np.zeros((B, nf, nf))
                    G[:, iu, ju] = dpairs
                    G[:, ju, iu] = dpairs
                    de += np.einsum("bij,bjd->bid", G, e)
                else:
                    de += dz0.reshape(B, nf, d)
            for f in range(len(self.field_names)):
                self.source.backward(f, batch.cat_ids[f], batch.cat_offsets[f], np.ascontiguousarray(de[:, f, :]), grads)
            for a, name in enumerate(self.numeric_names):
                dea = de[:, len(self.field_names) + a, :]
                grads[f"num_w/{name}"] += batch.numeric[:, a] @ dea
                grads[f"num_b/{name}"] += dea.sum(axis=0)
        return grads

    def loss_and_grads(self, batch):
        probs, cache = self.forward_batch(batch)
        loss = bce(batch.labels, probs)
        grads = self.backward_batch(cache, batch.labels)
        return loss, grads

    def export_embeddings(self):
        """Dense tables plus numeric affine params, for handoff to stage 2."""
        if not self.uses_embeddings or self.source.kind != "dense":
            raise ConfigError("export_embeddings needs a dense embedding source")
        n_num, d = len(self.numeric_names), self.d
        w = np.zeros((n_num, d))
        b = np.zeros((n_num, d))
        for a, name in enumerate(self.numeric_names):
            w[a] = self.params[f"num_w/{name}"]
            b[a] = self.params[f"num_b/{name}"]
        return EmbeddingTable(
            field_names=list(self.field_names),
            tables=[t.copy() for t in self.source.tables],
            numeric_names=list(self.numeric_names),
            numeric_weights=w,
            numeric_biases=b,
        )


def build_model(variant, field_names, field_sizes, numeric_names, d, seed, mlp_layers=(64, 32)):
    """Fresh model with a dense embedding source (stage-1 entry point)."""
    rng = rng_for(seed, "model-init")
    source = None
    if variant != "LR":
        source = DenseEmbeddingSource.fresh(rng, field_names, field_sizes, d)
    model = CtrModel(variant, field_names, field_sizes, numeric_names, d, source, mlp_layers)
    model.init_params(rng)
    return model


def model_from_embedding_table(variant, table, field_sizes, seed, mlp_layers=(64, 32)):
    """Stage-2 dense baseline: embeddings from a pretrained table, everything
    else fresh (numeric affine included, for comparability across variants)."""
    source = DenseEmbeddingSource(table.field_names, [t.copy() for t in table.tables])
    model = CtrModel(variant, table.field_names, field_sizes, table.numeric_names, table.dim, source, mlp_layers)
    model.init_params(rng_for(seed, "model-init"))
    return model


def model_from_codebook(variant, codebook, numeric_names, seed, mlp_layers=(64, 32)):
    """Stage-2 compressed model: frozen assignments, trainable codewords."""
    source = CodebookEmbeddingSource(
        codebook.field_names,
        codebook.field_offsets,
        codebook.codes,
        codebook.codewords.astype(np.float64),
    )
    sizes = np.diff(codebook.field_offsets).tolist()
    model = CtrModel(variant, codebook.field_names, sizes, numeric_names, codebook.dim, source, mlp_layers)
    model.init_params(rng_for(seed, "model-init"))
    return model


class Adam:
    """Adam with bias correction; optional L2 is added to the raw gradient
    before the moment updates."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, l2=0.0):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.l2 = float(l2)
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, p in params.items():
            g = grads[k]
            if self.l2 != 0.0:
                g = g + self.l2 * p
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return params


def train_epochs(model, split, seed, epochs, batch_size, lr, l2=0.0, patience=2, eval_batch_size=8192):
    """Mini-batch training with per-epoch validation and early stopping.

    Shuffles with a generator derived from (seed, "shuffle"), evaluates val
    AUC after every epoch, stops once the epochs since the best AUC exceed
    `patience`, and restores the best checkpoint before returning. Returns a
    history list of per-epoch dicts plus the index of the best epoch.
    """
    train, val = split.train, split.val
    if train.n_records == 0:
        raise ConfigError("training split is empty")
    use_val = val.n_records > 0
    opt = Adam(model.params, lr=lr, l2=l2)
    rng = rng_for(seed, "shuffle")
    history = []
    best_auc, best_epoch, best_params = -np.inf, -1, model.snapshot()
    for epoch in range(int(epochs)):
        t0 = time.perf_counter()
        perm = rng.permutation(train.n_records)
        losses = []
        for bi, lo in enumerate(range(0, train.n_records, int(batch_size))):
            batch = train.gather(perm[lo : lo + int(batch_size)])
            loss, grads = model.loss_and_grads(batch)
            if not np.isfinite(loss):
                norms = {k: float(np.linalg.norm(v)) for k, v in model.params.items()}
                raise TrainingDivergedError(
                    f"non-finite loss {loss} at epoch {epoch} batch {bi}", batch_index=bi, param_norms=norms
                )
            opt.step(model.params, grads)
            losses.append(loss)
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses)), "seconds": time.perf_counter() - t0}
        if use_val:
            val_probs = model.predict(val, batch_size=eval_batch_size)
            entry["val_auc"] = auc(val.labels, val_probs)
            entry["val_logloss"] = logloss(val.labels, val_probs)
        history.append(entry)
        if use_val:
            if entry["val_auc"] > best_auc:
                best_auc, best_epoch, best_params = entry["val_auc"], epoch, model.snapshot()
            elif epoch - best_epoch > patience:
                break
    if use_val:
        model.set_params(best_params)
    else:
        best_epoch = len(history) - 1
    return history, best_epoch


def forward(model, record):
    """Probability for a single encoded record."""
    batch = EncodedDataset.from_records([record], model.field_names, len(model.numeric_names))
    probs, _ = model.forward_batch(batch)
    return float(probs[0])


def backward(model, record, label):
    """(loss, grads) for a single encoded record."""
    batch = EncodedDataset.from_records([record], model.field_names, len(model.numeric_names))
    batch.labels[:] = float(label)
    probs, cache = model.forward_batch(batch)
    loss = bce(batch.labels, probs)
    return loss, model.backward_batch(cache, batch.labels)
