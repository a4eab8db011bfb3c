"""End-to-end runs: pretrain, quantize, retrain, account, report.

Variant dispatch
    MEC             entropy reg + contrastive, log-popularity weighting
    no_cons         entropy reg only (contrastive off)
    no_reg          contrastive only (regularizer and popularity weighting off)
    basic_pq        plain product quantization, uniform weights
    freq_pq         plain PQ but reconstruction weighted by raw counts
    dense_baseline  no quantization; stage 2 starts from the pretrained table

Popularity weighting of the reconstruction term and the entropy regularizer
form one mechanism and are enabled together (alpha > 0); the contrastive
term is gated by beta. Within one seed every variant shares the stage-1
pretraining and all stage RNG streams, so differences between variants come
from the losses alone.
"""

import time

import numpy as np

from mec import VARIANTS, kernels
from mec.artifacts import code_bits
from mec.config import validate_config
from mec.data import ColumnSchema, generate_synthetic, load_csv_dataset
from mec.errors import ConfigError
from mec.metrics import auc, logloss, weighted_code_entropy
from mec.models import build_model, model_from_codebook, model_from_embedding_table, train_epochs
from mec.quantizer import Codebook, QuantizerSettings, popularity_weight, train_codebooks
from mec.seeding import derive_seed

REPORT_FORMAT = "mec-report/1"


def load_dataset(cfg):
    """Build (DatasetSplit, FeatureVocabulary, numeric_names) per the config."""
    data = cfg["data"]
    if data["source"] == "synthetic":
        params = dict(data["synthetic"])
        params["split_ratios"] = list(data["split_ratios"])
        seed = data.get("seed")
        if seed is None:
            seed = derive_seed(cfg["seed"], "data")
        split, vocab = generate_synthetic(params, seed)
        return split, vocab, []
    csv_cfg = data["csv"]
    schema = ColumnSchema(
        label=csv_cfg["label"],
        categoricals=list(csv_cfg["categoricals"]),
        numerics=list(csv_cfg["numerics"]),
        delimiter=csv_cfg["delimiter"],
        multivalue_delimiter=csv_cfg["multivalue_delimiter"],
        has_header=csv_cfg["has_header"],
    )
    split, vocab = load_csv_dataset(csv_cfg["path"], schema, data["split_ratios"], data["min_count"])
    return split, vocab, list(csv_cfg["numerics"])


def account_memory(total_features, d, m, k, quantized=True, other_param_bytes=0.0):
    """Embedding memory accounting in bytes (float32 storage).

    dense: every feature holds a d-vector. Compressed: one set of K
    codewords per subspace plus ceil(log2 K) bits (floored at one bit) per
    feature per subspace; the bit cost is the idealized unrounded total.
    The compression ratio covers embedding storage only; MLP, linear and
    numeric-layer parameters are the same on both sides and are reported
    separately as other_param_bytes.
    """
    dense = float(total_features) * d * 4.0
    if not quantized:
        return {
            "dense_embedding_bytes": dense,
            "codebook_bytes": 0.0,
            "code_index_bytes": 0.0,
            "total_compressed_bytes": dense,
            "other_param_bytes": float(other_param_bytes),
            "compression_ratio": 1.0,
        }
    codebook = float(k) * d * 4.0
    code_index = float(total_features) * m * code_bits(k) / 8.0
    return {
        "dense_embedding_bytes": dense,
        "codebook_bytes": codebook,
        "code_index_bytes": code_index,
        "total_compressed_bytes": codebook + code_index,
        "other_param_bytes": float(other_param_bytes),
        "compression_ratio": dense / (codebook + code_index),
    }


def other_param_bytes(model):
    """float32 bytes of the model's non-embedding parameters."""
    skip = ("codewords",)
    total = 0
    for name, arr in model.params.items():
        if name in skip or name.startswith("emb/"):
            continue
        total += arr.size
    return float(total * 4)


def quantizer_dispatch(variant, q):
    """Effective (alpha, beta, weighting) for a variant given the config."""
    if variant == "MEC":
        alpha, beta = q["alpha"], q["beta"]
    elif variant == "no_cons":
        alpha, beta = q["alpha"], 0.0
    elif variant == "no_reg":
        alpha, beta = 0.0, q["beta"]
    elif variant in ("basic_pq", "freq_pq"):
        alpha, beta = 0.0, 0.0
    else:
        raise ConfigError(f"variant {variant!r} does not use the quantizer")
    if variant == "freq_pq":
        weighting = "raw"
    elif alpha > 0:
        weighting = "log2"
    else:
        weighting = "uniform"
    return float(alpha), float(beta), weighting


def training_weights(weighting, counts):
    if weighting == "raw":
        return counts.astype(np.float64)
    if weighting == "log2":
        return popularity_weight(counts).astype(np.float64)
    return None


def pretrain_stage(cfg, split, vocab, numeric_names):
    """Stage 1: train the dense CTR model, export its embedding table."""
    s1 = cfg["stage1"]
    seed = derive_seed(cfg["seed"], "stage1")
    t0 = time.perf_counter()
    model = build_model(
        s1["model"], vocab.field_names, vocab.sizes, numeric_names, cfg["embedding_dim"], seed
    )
    history, best_epoch = train_epochs(
        model,
        split,
        seed,
        epochs=s1["epochs"],
        batch_size=s1["batch_size"],
        lr=s1["lr"],
        l2=s1["l2"],
        patience=s1["patience"],
    )
    seconds = time.perf_counter() - t0
    return {
        "model": model,
        "table": model.export_embeddings(),
        "history": history,
        "best_epoch": best_epoch,
        "seconds": seconds,
    }


def quantize_stage(cfg, table, vocab, variant):
    """Stage 1b: learn the codebook for one quantized variant."""
    q = cfg["quantizer"]
    alpha, beta, weighting = quantizer_dispatch(variant, q)
    settings = QuantizerSettings(
        M=q["M"],
        K=q["K"],
        tau=q["tau"],
        rho=q["rho"],
        epsilon=q["epsilon"],
        n_negatives=q["n_negatives"],
        epochs=q["epochs"],
        batch_size=q["batch_size"],
        lr=q["lr"],
        update_rule=q["update_rule"],
        init_sample=q["init_sample"],
        reg_sample=q["reg_sample"],
    )
    counts = vocab.all_counts()
    weights = training_weights(weighting, counts)
    embeddings = np.concatenate(table.tables, axis=0)
    seed = derive_seed(cfg["seed"], "quantize")
    t0 = time.perf_counter()
    codewords, codes, trace = train_codebooks(embeddings, weights, settings, seed, alpha=alpha, beta=beta)
    codebook = Codebook(
        vocab.field_names,
        vocab.field_offsets,
        codewords.astype(np.float32),
        codes,
        popularity_weight(counts).astype(np.uint8),
    )
    seconds = time.perf_counter() - t0
    return {
        "codebook": codebook,
        "trace": trace,
        "alpha": alpha,
        "beta": beta,
        "weighting": weighting,
        "seconds": seconds,
    }


def retrain_stage(cfg, split, vocab, numeric_names, variant, pre, quant):
    """Stage 2: train the downstream model on the compressed (or dense) table."""
    s2 = cfg["stage2"]
    seed = derive_seed(cfg["seed"], "stage2")
    mlp = tuple(s2["mlp_layers"])
    t0 = time.perf_counter()
    if variant == "dense_baseline":
        model = model_from_embedding_table(s2["model"], pre["table"], vocab.sizes, seed, mlp)
    else:
        model = model_from_codebook(s2["model"], quant["codebook"], numeric_names, seed, mlp)
    history, best_epoch = train_epochs(
        model,
        split,
        seed,
        epochs=s2["epochs"],
        batch_size=s2["batch_size"],
        lr=s2["lr"],
        l2=s2["l2"],
        patience=s2["patience"],
    )
    seconds = time.perf_counter() - t0
    return {"model": model, "history": history, "best_epoch": best_epoch, "seconds": seconds}


def evaluate_model(model, dataset):
    """(auc, logloss) on a dataset; auc is None when undefined or empty."""
    if dataset.n_records == 0:
        return None, None
    probs = model.predict(dataset)
    try:
        a = auc(dataset.labels, probs)
    except ValueError:
        a = None
    return a, logloss(dataset.labels, probs)


def run_variant(cfg, split, vocab, numeric_names, variant=None, pre=None):
    """Full pipeline for one variant. `pre` reuses a pretrain result so
    ablations share stage 1 within a seed. Returns (report, bundle)."""
    validate_config(cfg)
    variant = variant or cfg["variant"]
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
    t_start = time.perf_counter()
    if pre is None:
        pre = pretrain_stage(cfg, split, vocab, numeric_names)
    quant = None
    if variant != "dense_baseline":
        quant = quantize_stage(cfg, table=pre["table"], vocab=vocab, variant=variant)
    post = retrain_stage(cfg, split, vocab, numeric_names, variant, pre, quant)

    model = post["model"]
    val_auc, val_ll = evaluate_model(model, split.val)
    test_auc, test_ll = evaluate_model(model, split.test)
    memory = account_memory(
        vocab.total_features,
        cfg["embedding_dim"],
        cfg["quantizer"]["M"],
        cfg["quantizer"]["K"],
        quantized=variant != "dense_baseline",
        other_param_bytes=other_param_bytes(model),
    )

    report = assemble_report(
        cfg,
        variant,
        dataset_summary(split, vocab, numeric_names),
        stage1_info={"history": pre["history"], "best_epoch": pre["best_epoch"]},
        quant_info=None
        if quant is None
        else {
            "alpha": quant["alpha"],
            "beta": quant["beta"],
            "weighting": quant["weighting"],
            "trace": quant["trace"],
            "entropy": weighted_code_entropy(quant["codebook"]),
        },
        stage2_info={"history": post["history"], "best_epoch": post["best_epoch"]},
        metrics={
            "val_auc": val_auc,
            "val_logloss": val_ll,
            "test_auc": test_auc,
            "test_logloss": test_ll,
        },
        memory=memory,
        timings={
            "stage1_s": pre["seconds"],
            "quantize_s": 0.0 if quant is None else quant["seconds"],
            "stage2_s": post["seconds"],
            "total_s": time.perf_counter() - t_start,
        },
    )
    bundle = {"pre": pre, "quant": quant, "post": post}
    return report, bundle


def dataset_summary(split, vocab, numeric_names):
    return {
        "n_train": split.train.n_records,
        "n_val": split.val.n_records,
        "n_test": split.test.n_records,
        "n_fields": vocab.n_fields,
        "field_sizes": vocab.sizes,
        "n_numeric": len(numeric_names),
        "total_features": vocab.total_features,
    }


def assemble_report(cfg, variant, dataset, stage1_info, quant_info, stage2_info, metrics, memory, timings):
    """Report dict shared by in-memory runs and the step-by-step CLI path.

    Stage blocks may be None when a step command lacks the earlier stage's
    history (it was run in another process without sidecar files)."""
    quantizer_block = None
    if quant_info is not None:
        quantizer_block = {
            "M": cfg["quantizer"]["M"],
            "K": cfg["quantizer"]["K"],
            "alpha": quant_info["alpha"],
            "beta": quant_info["beta"],
            "weighting": quant_info["weighting"],
            "trace": quant_info["trace"],
            "entropy": quant_info["entropy"],
            "empty_codes": quant_info["trace"][-1]["empty_codes"] if quant_info["trace"] else None,
        }
    return {
        "format": REPORT_FORMAT,
        "created_unix": time.time(),
        "variant": variant,
        "seed": cfg["seed"],
        "backend": kernels.active_backend(),
        "config": cfg,
        "dataset": dataset,
        "stage1": None
        if stage1_info is None
        else {"model": cfg["stage1"]["model"], **stage1_info},
        "quantizer": quantizer_block,
        "stage2": None
        if stage2_info is None
        else {"model": cfg["stage2"]["model"], **stage2_info},
        "metrics": metrics,
        "memory": memory,
        "timings": timings,
    }


def ablate(cfg, variants=None, seeds=None, progress=None):
    """Paired runs: per seed one shared pretrain, then every variant.

    Returns a list of dicts {seed, variant, report, bundle}.
    """
    variants = list(variants) if variants is not None else list(VARIANTS)
    seeds = list(seeds) if seeds is not None else [cfg["seed"]]
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variants {unknown}; expected subset of {VARIANTS}")
    results = []
    data_cache = {}
    for seed in seeds:
        run_cfg = {**cfg, "seed": int(seed)}
        data_seed = run_cfg["data"].get("seed")
        cache_key = data_seed if data_seed is not None else derive_seed(int(seed), "data")
        if cache_key not in data_cache:
            data_cache[cache_key] = load_dataset(run_cfg)
        split, vocab, numeric_names = data_cache[cache_key]
        pre = pretrain_stage(run_cfg, split, vocab, numeric_names)
        for variant in variants:
            if progress:
                progress(f"seed {seed} variant {variant}")
            report, bundle = run_variant(run_cfg, split, vocab, numeric_names, variant=variant, pre=pre)
            results.append({"seed": int(seed), "variant": variant, "report": report, "bundle": bundle})
    return results
