"""Product quantizer: weighting, losses, gradients, training loop."""

import numpy as np
import pytest

from mec.errors import ConfigError, ShapeMismatchError
from mec.quantizer import (
    Codebook,
    QuantizerSettings,
    assign,
    contrastive_loss,
    contrastive_loss_and_grad,
    kmeans_pp_init,
    popularity_weight,
    recon_loss,
    recon_loss_and_grad,
    reconstruct,
    reg_loss,
    reg_loss_and_grad,
    sample_negative,
    soft_assign,
    train_codebooks,
    usage_distribution,
)
from mec.seeding import rng_for


def test_popularity_weight_buckets():
    counts = np.array([0, 1, 2, 3, 4, 1023, 1024, 2**20])
    got = popularity_weight(counts)
    assert list(got) == [1, 1, 2, 2, 3, 10, 11, 21]
    assert got.max() <= 255  # must fit the artifact's byte per feature


def hard_assign(S, CW):
    """Per-subspace nearest-codeword assignment, stacked to (n, M)."""
    m, _, dm = CW.shape
    return np.stack([assign(S[:, i * dm : (i + 1) * dm], CW[i]) for i in range(m)], axis=1)


def test_assign_reconstruct_roundtrip_on_exact_codewords():
    rng = np.random.default_rng(41)
    CW = rng.normal(size=(2, 5, 3))
    codes_true = rng.integers(0, 5, size=(20, 2))
    S = reconstruct(codes_true, CW)
    assert S.shape == (20, 6)
    codes = hard_assign(S, CW)
    # points sitting exactly on codewords must map back to them (up to
    # duplicate codewords, which this CW draw will not contain)
    assert np.array_equal(codes, codes_true)
    assert recon_loss(S, reconstruct(codes, CW)) == pytest.approx(0.0, abs=1e-20)


def test_reconstruct_rejects_bad_codes():
    CW = np.zeros((2, 4, 3))
    with pytest.raises(ShapeMismatchError):
        reconstruct(np.zeros((5, 3), dtype=np.int64), CW)


def test_soft_assign_rows_normalize_and_sharpen():
    rng = np.random.default_rng(42)
    S = rng.normal(size=(30, 3))
    C = rng.normal(size=(4, 3))
    soft = soft_assign(S, C, tau=1.0)
    assert soft.shape == (30, 4)
    assert np.allclose(soft.sum(axis=1), 1.0, rtol=1e-12)
    hard = assign(S, C)
    sharp = soft_assign(S, C, tau=1e-6)
    assert np.array_equal(sharp.argmax(axis=1), hard)
    # colder temperature concentrates mass on the argmin
    warm_top = np.take_along_axis(soft, hard[:, None], axis=1)
    cold_top = np.take_along_axis(sharp, hard[:, None], axis=1)
    assert np.all(cold_top >= warm_top - 1e-12)
    with pytest.raises(ConfigError):
        soft_assign(S, C, tau=0.0)


def test_usage_distribution_weights_and_errors():
    soft = np.zeros((2, 1, 2))
    soft[0, 0] = [1.0, 0.0]
    soft[1, 0] = [0.0, 1.0]
    p = usage_distribution(soft, weights=np.array([3.0, 1.0]))
    assert np.allclose(p[0], [0.75, 0.25])
    with pytest.raises(ConfigError):
        usage_distribution(soft, weights=np.zeros(2))


def test_reg_loss_bounds_and_uniform_value():
    rng = np.random.default_rng(43)
    for k in (2, 4, 64):
        soft = rng.dirichlet(np.ones(k) * rng.uniform(0.1, 5.0), size=(40, 1))
        w = rng.uniform(0.0, 3.0, size=40)
        w[0] = 0.0
        val = reg_loss(soft, weights=w)
        assert 1.0 / k - 1e-9 <= val <= 1.0 + 1e-9
        uniform = np.full((10, 1, k), 1.0 / k)
        assert reg_loss(uniform) == pytest.approx(1.0 / k, rel=1e-7)


def _fd_grad(fn, CW, h=1e-6, picks=12, seed=0):
    rng = np.random.default_rng(seed)
    flat = CW.ravel()
    coords = rng.choice(flat.size, size=min(picks, flat.size), replace=False)
    out = []
    for j in coords:
        orig = flat[j]
        flat[j] = orig + h
        lp = fn(CW)
        flat[j] = orig - h
        lm = fn(CW)
        flat[j] = orig
        out.append((j, (lp - lm) / (2 * h)))
    return out


def test_reg_loss_and_grad_matches_finite_differences():
    rng = np.random.default_rng(44)
    S = rng.normal(size=(25, 6))
    CW = rng.normal(size=(2, 5, 3))
    w = rng.uniform(0.5, 3.0, size=25)
    tau = 0.4
    loss, grad = reg_loss_and_grad(S, CW, weights=w, tau=tau)
    wn = w / w.sum()
    # loss value agrees with composing the public pieces
    soft = np.stack([soft_assign(S[:, 3 * i : 3 * (i + 1)], CW[i], tau) for i in range(2)], axis=1)
    assert loss == pytest.approx(reg_loss(soft, weights=wn), rel=1e-10)
    for j, fd in _fd_grad(lambda C: reg_loss_and_grad(S, C, weights=w, tau=tau)[0], CW):
        an = grad.ravel()[j]
        assert abs(an - fd) / max(1e-6, abs(an), abs(fd)) < 1e-4


def test_reg_loss_and_grad_uniform_weights_are_default():
    rng = np.random.default_rng(45)
    S = rng.normal(size=(10, 4))
    CW = rng.normal(size=(2, 3, 2))
    l_none, g_none = reg_loss_and_grad(S, CW, weights=None, tau=0.7)
    l_ones, g_ones = reg_loss_and_grad(S, CW, weights=np.ones(10), tau=0.7)
    assert l_none == pytest.approx(l_ones, rel=1e-14)
    assert np.allclose(g_none, g_ones, rtol=1e-13, atol=1e-15)
    with pytest.raises(ConfigError):
        reg_loss_and_grad(S, CW, tau=-1.0)


def test_recon_loss_and_grad_matches_finite_differences():
    rng = np.random.default_rng(46)
    S = rng.normal(size=(30, 6))
    CW = rng.normal(scale=2.0, size=(2, 4, 3))  # spread out: stable assignments
    w = rng.uniform(0.5, 2.0, size=30)
    codes = hard_assign(S, CW)
    loss, grad = recon_loss_and_grad(S, codes, CW, w)
    want = recon_loss(S, reconstruct(codes, CW), w)
    assert loss == pytest.approx(want, rel=1e-12)
    fn = lambda C: recon_loss(S, reconstruct(codes, C), w)  # codes held fixed
    for j, fd in _fd_grad(fn, CW, picks=16):
        an = grad.ravel()[j]
        assert abs(an - fd) / max(1e-6, abs(an), abs(fd)) < 1e-4


def test_contrastive_kernel_matches_reference_and_fd():
    rng = np.random.default_rng(47)
    S = rng.normal(size=(12, 6))
    CW = rng.normal(size=(2, 4, 3))
    codes = hard_assign(S, CW)
    negs = rng.integers(0, 4, size=(12, 3, 2))
    loss, grad = contrastive_loss_and_grad(S, codes, negs, CW)
    assert loss == pytest.approx(contrastive_loss(S, codes, negs, CW), rel=1e-10)
    fn = lambda C: contrastive_loss(S, codes, negs, C)
    for j, fd in _fd_grad(fn, CW, picks=16):
        an = grad.ravel()[j]
        assert abs(an - fd) / max(1e-6, abs(an), abs(fd)) < 1e-4


def test_sample_negative_rho_extremes():
    rng = np.random.default_rng(48)
    codes = rng.integers(0, 8, size=(40, 3, 2))
    same = sample_negative(codes, rho=0.0, k=8, rng=np.random.default_rng(1))
    assert np.array_equal(same, codes)
    redrawn = sample_negative(codes, rho=1.0, k=8, rng=np.random.default_rng(1))
    assert redrawn.shape == codes.shape
    assert not np.array_equal(redrawn, codes)  # 240 positions; collision odds ~0
    assert redrawn.min() >= 0 and redrawn.max() < 8
    with pytest.raises(ConfigError):
        sample_negative(codes, rho=1.5, k=8, rng=rng)


def test_sample_negative_replacement_rate():
    rng = np.random.default_rng(49)
    codes = np.zeros((4000, 1, 1), dtype=np.int64)
    out = sample_negative(codes, rho=0.3, k=1000, rng=rng)
    # replaced positions rarely redraw 0, so the changed fraction tracks rho
    changed = float(np.mean(out != 0))
    assert 0.25 < changed < 0.35


def test_kmeans_pp_init_deterministic_and_on_points():
    rng = np.random.default_rng(50)
    X = rng.normal(size=(30, 3))
    c1 = kmeans_pp_init(X, 4, np.random.default_rng(5))
    c2 = kmeans_pp_init(X, 4, np.random.default_rng(5))
    assert np.array_equal(c1, c2)
    for center in c1:
        assert np.min(np.sum((X - center) ** 2, axis=1)) == pytest.approx(0.0, abs=1e-18)
    assert len({tuple(c) for c in c1}) == 4  # distinct points stay distinct


def test_settings_validation():
    good = QuantizerSettings(M=2, K=4)
    good.validate(6)
    with pytest.raises(ConfigError):
        QuantizerSettings(M=4, K=4).validate(6)  # 6 % 4 != 0
    with pytest.raises(ConfigError):
        QuantizerSettings(M=2, K=4, update_rule="sgd").validate(6)
    with pytest.raises(ConfigError):
        QuantizerSettings(M=2, K=4, tau=0.0).validate(6)
    with pytest.raises(ConfigError):
        QuantizerSettings(M=2, K=4, init_sample=3).validate(6)  # < K


def _settings(**kw):
    base = dict(M=2, K=4, tau=0.5, rho=0.3, n_negatives=2, epochs=4, batch_size=64, lr=0.05, init_sample=16)
    base.update(kw)
    return QuantizerSettings(**base)


def test_train_codebooks_guards():
    rng = np.random.default_rng(51)
    S = rng.normal(size=(40, 6))
    with pytest.raises(ConfigError):
        train_codebooks(S, None, _settings(update_rule="centroid"), seed=1, alpha=0.1)
    with pytest.raises(ConfigError):
        train_codebooks(S, None, _settings(rho=0.0), seed=1, beta=0.1)
    with pytest.raises(ShapeMismatchError):
        train_codebooks(S, np.ones(7), _settings(), seed=1)


def test_train_codebooks_centroid_monotone_recon():
    rng = np.random.default_rng(52)
    S = rng.normal(size=(60, 6))
    cw, codes, trace = train_codebooks(S, None, _settings(update_rule="centroid", epochs=8), seed=2)
    assert cw.shape == (2, 4, 3)
    assert codes.shape == (60, 2)
    recons = [t["recon"] for t in trace]
    # Lloyd iterations never increase the objective
    for a, b in zip(recons, recons[1:]):
        assert b <= a + 1e-12
    assert all(t["reg"] == 0.0 and t["con"] == 0.0 for t in trace)


def test_train_codebooks_adam_trains_all_terms():
    rng = np.random.default_rng(53)
    S = rng.normal(size=(200, 6))
    w = popularity_weight(rng.integers(0, 500, size=200)).astype(np.float64)
    cw, codes, trace = train_codebooks(S, w, _settings(epochs=6), seed=3, alpha=0.5, beta=0.1)
    assert len(trace) == 6
    for entry in trace:
        assert set(entry) == {"recon", "reg", "con", "total", "empty_codes", "seconds"}
        assert entry["reg"] > 0.0
        assert entry["con"] > 0.0
        assert entry["total"] == pytest.approx(entry["recon"] + 0.5 * entry["reg"] + 0.1 * entry["con"], rel=1e-9)
    assert trace[-1]["recon"] < trace[0]["recon"]


def test_train_codebooks_is_seed_deterministic():
    rng = np.random.default_rng(54)
    S = rng.normal(size=(80, 4))
    w = np.ones(80)
    a = train_codebooks(S, w, _settings(M=2, K=4), seed=9, alpha=0.3, beta=0.1)
    b = train_codebooks(S, w, _settings(M=2, K=4), seed=9, alpha=0.3, beta=0.1)
    assert np.array_equal(a[0], b[0])
    assert np.array_equal(a[1], b[1])
    c = train_codebooks(S, w, _settings(M=2, K=4), seed=10, alpha=0.3, beta=0.1)
    assert not np.array_equal(a[0], c[0])


def test_codebook_validations():
    rng = np.random.default_rng(55)
    cw = rng.normal(size=(2, 4, 3)).astype(np.float32)
    codes = rng.integers(0, 4, size=(10, 2))
    ok = Codebook(["a"], [0, 10], cw, codes, np.ones(10, dtype=np.uint8))
    assert ok.dim == 6 and ok.n_features == 10
    with pytest.raises(ShapeMismatchError):
        Codebook(["a"], [0, 9], cw, codes, np.ones(10, dtype=np.uint8))
    with pytest.raises(ShapeMismatchError):
        Codebook(["a", "b"], [0, 10], cw, codes, np.ones(10, dtype=np.uint8))
    bad_codes = codes.copy()
    bad_codes[0, 0] = 4
    with pytest.raises(ShapeMismatchError):
        Codebook(["a"], [0, 10], cw, bad_codes, np.ones(10, dtype=np.uint8))
    with pytest.raises(ShapeMismatchError):
        Codebook(["a"], [0, 10], cw, codes, np.ones(9, dtype=np.uint8))


def test_codebook_reconstruct_rows_subsets():
    rng = np.random.default_rng(56)
    cw = rng.normal(size=(2, 4, 3)).astype(np.float32)
    codes = rng.integers(0, 4, size=(10, 2))
    cb = Codebook(["a"], [0, 10], cw, codes, np.ones(10, dtype=np.uint8))
    full = cb.reconstruct_rows()
    some = cb.reconstruct_rows(np.array([3, 7]))
    assert np.array_equal(some, full[[3, 7]])
    want = np.concatenate([cw[0][codes[3, 0]], cw[1][codes[3, 1]]])
    assert np.allclose(full[3], want, rtol=1e-6, atol=1e-7)
