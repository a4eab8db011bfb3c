"""Shared fixtures: a toy-scale config and one pre-run pipeline bundle."""

import pytest

from mec.config import default_config, validate_config


def make_tiny_config():
    """Small-but-real config; a full run takes a couple of seconds."""
    cfg = default_config()
    cfg["data"]["synthetic"].update(n_samples=1500, vocab_per_field=60, hidden_dim=4)
    cfg["stage1"].update(epochs=2, batch_size=256)
    cfg["stage2"].update(epochs=2, batch_size=256, mlp_layers=[16, 8])
    cfg["quantizer"].update(K=8, epochs=3, init_sample=32, batch_size=1024, reg_sample=64)
    validate_config(cfg)
    return cfg


@pytest.fixture
def tiny_cfg():
    return make_tiny_config()


@pytest.fixture(scope="session")
def tiny_run():
    """One full MEC run at toy scale, shared by read-only tests."""
    from mec.pipeline import load_dataset, run_variant

    cfg = make_tiny_config()
    split, vocab, numeric_names = load_dataset(cfg)
    report, bundle = run_variant(cfg, split, vocab, numeric_names, variant="MEC")
    return {
        "cfg": cfg,
        "split": split,
        "vocab": vocab,
        "numeric_names": numeric_names,
        "report": report,
        "bundle": bundle,
    }
