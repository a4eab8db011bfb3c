"""CTR model forward/backward, the optimizer, and the training loop."""

import numpy as np
import pytest

from mec.data import EncodedDataset, InteractionRecord, generate_synthetic
from mec.errors import ConfigError, TrainingDivergedError
from mec.models import (
    MODEL_VARIANTS,
    Adam,
    bce,
    backward,
    build_model,
    forward,
    model_from_codebook,
    model_from_embedding_table,
    train_epochs,
)
from mec.quantizer import Codebook

FIELDS = ["f0", "f1", "f2"]
SIZES = [5, 4, 6]
NUMERICS = ["price"]
D = 4


def toy_batch(rng, n=6, multi=True):
    records = []
    for _ in range(n):
        cat_ids = []
        for size in SIZES:
            width = int(rng.integers(1, 3)) if multi else 1
            cat_ids.append(list(rng.integers(0, size, size=width)))
        records.append(
            InteractionRecord(
                label=float(rng.integers(0, 2)),
                cat_ids=cat_ids,
                numeric=[float(rng.normal())],
            )
        )
    return EncodedDataset.from_records(records, FIELDS, n_numeric=1)


def fd_worst_rel(model, batch, rng, coords_per_tensor=4, h=1e-5):
    """Worst relative error between analytic and central-difference grads."""
    _, grads = model.loss_and_grads(batch)
    worst = 0.0
    for name in sorted(model.params):
        flat = model.params[name].ravel()
        picks = rng.choice(flat.size, size=min(coords_per_tensor, flat.size), replace=False)
        for j in picks:
            orig = flat[j]
            flat[j] = orig + h
            lp = bce(batch.labels, model.forward_batch(batch)[0])
            flat[j] = orig - h
            lm = bce(batch.labels, model.forward_batch(batch)[0])
            flat[j] = orig
            fd = (lp - lm) / (2 * h)
            an = grads[name].ravel()[j]
            worst = max(worst, abs(an - fd) / max(1e-6, abs(an), abs(fd)))
    return worst


@pytest.mark.parametrize("variant", MODEL_VARIANTS)
def test_forward_shapes_and_range(variant):
    rng = np.random.default_rng(31)
    model = build_model(variant, FIELDS, SIZES, NUMERICS, D, seed=1)
    batch = toy_batch(rng)
    probs, cache = model.forward_batch(batch)
    assert probs.shape == (batch.n_records,)
    assert np.all((probs > 0) & (probs < 1))
    assert model.uses_embeddings == (variant != "LR")
    if variant == "LR":
        assert not any(k.startswith("emb/") for k in model.params)


@pytest.mark.parametrize("variant", MODEL_VARIANTS)
def test_gradients_match_finite_differences(variant):
    rng = np.random.default_rng(32)
    model = build_model(variant, FIELDS, SIZES, NUMERICS, D, seed=2, mlp_layers=(6, 4))
    batch = toy_batch(rng)
    assert fd_worst_rel(model, batch, rng) < 1e-4


def test_codebook_model_gradients_match_finite_differences():
    rng = np.random.default_rng(33)
    g = sum(SIZES)
    cb = Codebook(
        FIELDS,
        np.cumsum([0] + SIZES),
        rng.normal(size=(2, 3, 2)).astype(np.float32),
        rng.integers(0, 3, size=(g, 2)),
        np.ones(g, dtype=np.uint8),
    )
    model = model_from_codebook("FM", cb, NUMERICS, seed=3)
    batch = toy_batch(rng)
    assert "codewords" in model.params
    assert fd_worst_rel(model, batch, rng, coords_per_tensor=6) < 1e-4


def test_pnn_mlp_input_dim_counts_pairs():
    model = build_model("PNN-lite", FIELDS, SIZES, NUMERICS, D, seed=1)
    n_vec = len(FIELDS) + len(NUMERICS)
    assert model.mlp_input_dim() == n_vec * D + n_vec * (n_vec - 1) // 2
    deep = build_model("DeepFM-lite", FIELDS, SIZES, NUMERICS, D, seed=1)
    assert deep.mlp_input_dim() == n_vec * D


def test_predict_equals_forward_batch():
    rng = np.random.default_rng(34)
    model = build_model("DeepFM-lite", FIELDS, SIZES, NUMERICS, D, seed=4, mlp_layers=(6, 4))
    ds = toy_batch(rng, n=50)
    full, _ = model.forward_batch(ds)
    assert np.allclose(model.predict(ds, batch_size=7), full, rtol=1e-12, atol=0)


def test_single_record_helpers_match_batch():
    rng = np.random.default_rng(35)
    model = build_model("FM", FIELDS, SIZES, NUMERICS, D, seed=5)
    ds = toy_batch(rng, n=4)
    probs, _ = model.forward_batch(ds)
    for i in range(4):
        rec = ds.record(i)
        assert forward(model, rec) == pytest.approx(probs[i], rel=1e-12)
        loss, grads = backward(model, rec, ds.labels[i])
        assert np.isfinite(loss)
        assert set(grads) == set(model.params)


def test_build_model_is_seed_deterministic():
    a = build_model("FM", FIELDS, SIZES, NUMERICS, D, seed=7)
    b = build_model("FM", FIELDS, SIZES, NUMERICS, D, seed=7)
    c = build_model("FM", FIELDS, SIZES, NUMERICS, D, seed=8)
    for name in a.params:
        assert np.array_equal(a.params[name], b.params[name])
    assert any(not np.array_equal(a.params[n], c.params[n]) for n in a.params)


def test_adam_matches_reference_loop():
    rng = np.random.default_rng(36)
    x = rng.normal(size=(3, 2))
    g = rng.normal(size=(3, 2))
    params = {"w": x.copy()}
    opt = Adam(params, lr=0.01, l2=0.1)
    for _ in range(5):
        opt.step(params, {"w": g})

    # hand-rolled reference
    lr, b1, b2, eps, l2 = 0.01, 0.9, 0.999, 1e-8, 0.1
    w = x.copy()
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    for t in range(1, 6):
        gt = g + l2 * w
        m = b1 * m + (1 - b1) * gt
        v = b2 * v + (1 - b2) * gt * gt
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        w -= lr * mh / (np.sqrt(vh) + eps)
    assert np.allclose(params["w"], w, rtol=1e-12, atol=1e-14)


def test_adam_leaves_untouched_rows_bitwise_identical():
    rng = np.random.default_rng(37)
    w0 = rng.normal(size=(6, 3))
    params = {"w": w0.copy()}
    opt = Adam(params, lr=0.05)
    g = np.zeros_like(w0)
    g[2] = 1.0  # only row 2 ever sees gradient
    for _ in range(4):
        opt.step(params, {"w": g})
    untouched = [0, 1, 3, 4, 5]
    assert np.array_equal(params["w"][untouched], w0[untouched])
    assert not np.array_equal(params["w"][2], w0[2])


SYN = dict(
    n_samples=600,
    n_fields=3,
    vocab_per_field=15,
    zipf_exponent=1.3,
    noise=0.1,
    hidden_dim=4,
    split_ratios=[0.7, 0.2, 0.1],
)


def _toy_split():
    return generate_synthetic(dict(SYN), 11)


def test_train_epochs_history_and_determinism():
    split, vocab = _toy_split()
    results = []
    for _ in range(2):
        model = build_model("FM", vocab.field_names, vocab.sizes, [], D, seed=6)
        history, best = train_epochs(model, split, seed=6, epochs=3, batch_size=128, lr=0.01, patience=3)
        results.append((model, history, best))
    m1, h1, b1 = results[0]
    m2, h2, b2 = results[1]
    assert b1 == b2
    assert len(h1) == 3
    for e1, e2 in zip(h1, h2):
        assert e1["epoch"] == e2["epoch"]
        assert e1["train_loss"] == e2["train_loss"]
        assert e1["val_auc"] == e2["val_auc"]
        assert set(e1) == {"epoch", "train_loss", "seconds", "val_auc", "val_logloss"}
    for name in m1.params:
        assert np.array_equal(m1.params[name], m2.params[name])


def test_train_epochs_restores_best_snapshot():
    from mec.metrics import auc

    split, vocab = _toy_split()
    model = build_model("FM", vocab.field_names, vocab.sizes, [], D, seed=8)
    history, best = train_epochs(model, split, seed=8, epochs=6, batch_size=64, lr=0.05, patience=5)
    assert best == int(np.argmax([h["val_auc"] for h in history]))
    got = auc(split.val.labels, model.predict(split.val))
    assert got == pytest.approx(history[best]["val_auc"], rel=1e-12)


def test_train_epochs_early_stops():
    split, vocab = _toy_split()
    model = build_model("FM", vocab.field_names, vocab.sizes, [], D, seed=9)
    history, best = train_epochs(model, split, seed=9, epochs=50, batch_size=64, lr=0.05, patience=1)
    assert len(history) < 50
    assert len(history) - 1 - best > 1  # stopped because patience ran out


def test_training_diverged_error_carries_context():
    split, vocab = _toy_split()
    model = build_model("FM", vocab.field_names, vocab.sizes, [], D, seed=10)
    model.params["bias"][...] = np.nan
    with pytest.raises(TrainingDivergedError) as err:
        train_epochs(model, split, seed=10, epochs=1, batch_size=64, lr=0.01)
    assert err.value.batch_index == 0
    assert "bias" in err.value.param_norms


def test_export_embeddings_dense_only():
    rng = np.random.default_rng(38)
    model = build_model("FM", FIELDS, SIZES, NUMERICS, D, seed=11)
    table = model.export_embeddings()
    assert table.dim == D
    assert [t.shape for t in table.tables] == [(s, D) for s in SIZES]
    # handoff copies, not views
    table.tables[0][0, 0] += 1.0
    assert model.source.tables[0][0, 0] != table.tables[0][0, 0]

    rebuilt = model_from_embedding_table("FM", table, SIZES, seed=12)
    for f in range(len(FIELDS)):
        assert np.array_equal(rebuilt.source.tables[f], table.tables[f])

    g = sum(SIZES)
    cb = Codebook(
        FIELDS,
        np.cumsum([0] + SIZES),
        rng.normal(size=(2, 3, 2)).astype(np.float32),
        rng.integers(0, 3, size=(g, 2)),
        np.ones(g, dtype=np.uint8),
    )
    cb_model = model_from_codebook("FM", cb, NUMERICS, seed=13)
    with pytest.raises(ConfigError):
        cb_model.export_embeddings()


def test_codebook_model_looks_up_reconstructions():
    rng = np.random.default_rng(39)
    g = sum(SIZES)
    cb = Codebook(
        FIELDS,
        np.cumsum([0] + SIZES),
        rng.normal(size=(2, 2, 2)).astype(np.float32),
        rng.integers(0, 2, size=(g, 2)),
        np.ones(g, dtype=np.uint8),
    )
    model = model_from_codebook("FM", cb, [], seed=14)
    recon = cb.reconstruct_rows()
    # a single-token record for (field 1, local id 2) must embed as the
    # reconstruction of global row offset(field 1) + 2
    rec = InteractionRecord(label=1.0, cat_ids=[[0], [2], [0]], numeric=[])
    ds = EncodedDataset.from_records([rec], FIELDS, n_numeric=0)
    _, cache = model.forward_batch(ds)
    gid = SIZES[0] + 2
    assert np.allclose(cache["e"][0, 1], recon[gid], rtol=1e-6, atol=1e-8)
