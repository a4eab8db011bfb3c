"""Evaluation exports: latency harness, hyper-parameter sweeps, CSV writers.

CSV cells format floats with six significant digits; None becomes an empty
cell. The latency harness measures one-epoch units of the two stage-1
phases (CTR pretraining and codebook training) so per-variant comparisons
are not drowned out by epoch-count choices.
"""

import csv
import statistics

from mec import VARIANTS, pipeline
from mec.config import validate_config
from mec.errors import ConfigError
from mec.metrics import code_distribution


def fmt_cell(x):
    if x is None:
        return ""
    if isinstance(x, bool):
        return str(x)
    if isinstance(x, float):
        return f"{x:.6g}"
    return str(x)


def write_csv(path, fieldnames, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fieldnames)
        for row in rows:
            writer.writerow([fmt_cell(row.get(k)) for k in fieldnames])


def _stats(xs):
    return (statistics.fmean(xs), statistics.pstdev(xs) if len(xs) > 1 else 0.0)


LATENCY_FIELDS = (
    "variant",
    "reps",
    "stage1_epoch_mean_s",
    "stage1_epoch_std_s",
    "quantize_epoch_mean_s",
    "quantize_epoch_std_s",
    "stage1_total_mean_s",
    "stage1_total_std_s",
)


def latency_harness(cfg, variants=None, reps=10, progress=None):
    """Times one stage-1 training epoch and one codebook-training epoch per
    variant, repeated `reps` times.

    The epoch workloads are the configured ones (same data, batch sizes and
    loss terms); only the epoch counts are forced to 1, and the recorded
    time is the in-loop per-epoch clock (setup such as k-means++ seeding or
    model init is excluded). The pretraining epoch is variant-independent
    and measured once per repetition; its time is shared by every variant's
    total. The dense baseline has no quantizer phase and reports 0 for it.
    Codebook timing runs against embeddings from one untimed full
    pretraining so every repetition quantizes the same realistic table.
    """
    validate_config(cfg)
    variants = list(variants) if variants is not None else list(VARIANTS)
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variants {unknown}")
    if reps < 1:
        raise ConfigError(f"reps must be >= 1, got {reps}")
    split, vocab, numeric_names = pipeline.load_dataset(cfg)
    pre_full = pipeline.pretrain_stage(cfg, split, vocab, numeric_names)
    cfg_p1 = {**cfg, "stage1": {**cfg["stage1"], "epochs": 1, "patience": 0}}
    cfg_q1 = {**cfg, "quantizer": {**cfg["quantizer"], "epochs": 1}}
    stage1_s = []
    quantize_s = {v: [] for v in variants}
    for rep in range(int(reps)):
        if progress:
            progress(f"latency rep {rep + 1}/{reps}")
        pre = pipeline.pretrain_stage(cfg_p1, split, vocab, numeric_names)
        stage1_s.append(pre["history"][0]["seconds"])
        for variant in variants:
            if variant == "dense_baseline":
                quantize_s[variant].append(0.0)
            else:
                quant = pipeline.quantize_stage(cfg_q1, pre_full["table"], vocab, variant)
                quantize_s[variant].append(quant["trace"][0]["seconds"])

    rows = []
    p_mean, p_std = _stats(stage1_s)
    for variant in variants:
        q_mean, q_std = _stats(quantize_s[variant])
        totals = [p + q for p, q in zip(stage1_s, quantize_s[variant])]
        t_mean, t_std = _stats(totals)
        rows.append(
            {
                "variant": variant,
                "reps": int(reps),
                "stage1_epoch_mean_s": p_mean,
                "stage1_epoch_std_s": p_std,
                "quantize_epoch_mean_s": q_mean,
                "quantize_epoch_std_s": q_std,
                "stage1_total_mean_s": t_mean,
                "stage1_total_std_s": t_std,
            }
        )
    return rows


SWEEP_FIELDS = (
    "alpha",
    "beta",
    "M",
    "K",
    "val_auc",
    "val_logloss",
    "test_auc",
    "test_logloss",
    "compression_ratio",
    "entropy",
    "skip_reason",
)


def sweep(cfg, alphas=None, betas=None, ms=None, ks=None, variant="MEC", progress=None):
    """Grid over quantizer hyper-parameters; each combo is a full pipeline
    run sharing one pretraining. Invalid combos become rows with a
    skip_reason instead of aborting the grid; duplicate grid points are
    executed once and the row repeated."""
    validate_config(cfg)
    alphas = list(alphas) if alphas else [cfg["quantizer"]["alpha"]]
    betas = list(betas) if betas else [cfg["quantizer"]["beta"]]
    ms = list(ms) if ms else [cfg["quantizer"]["M"]]
    ks = list(ks) if ks else [cfg["quantizer"]["K"]]
    split, vocab, numeric_names = pipeline.load_dataset(cfg)
    pre = pipeline.pretrain_stage(cfg, split, vocab, numeric_names)
    rows = []
    seen = {}
    for m in ms:
        for k in ks:
            for alpha in alphas:
                for beta in betas:
                    key = (alpha, beta, m, k)
                    if key in seen:
                        rows.append(dict(seen[key]))
                        continue
                    row = {"alpha": alpha, "beta": beta, "M": m, "K": k, "skip_reason": None}
                    run_cfg = {
                        **cfg,
                        "quantizer": {**cfg["quantizer"], "alpha": alpha, "beta": beta, "M": m, "K": k},
                    }
                    try:
                        validate_config(run_cfg)
                    except ConfigError as exc:
                        row["skip_reason"] = str(exc)
                        seen[key] = row
                        rows.append(row)
                        continue
                    if progress:
                        progress(f"sweep alpha={alpha} beta={beta} M={m} K={k}")
                    report, _ = pipeline.run_variant(run_cfg, split, vocab, numeric_names, variant=variant, pre=pre)
                    row.update(
                        {
                            "val_auc": report["metrics"]["val_auc"],
                            "val_logloss": report["metrics"]["val_logloss"],
                            "test_auc": report["metrics"]["test_auc"],
                            "test_logloss": report["metrics"]["test_logloss"],
                            "compression_ratio": report["memory"]["compression_ratio"],
                            "entropy": None if report["quantizer"] is None else report["quantizer"]["entropy"],
                        }
                    )
                    seen[key] = row
                    rows.append(row)
    return rows


ABLATION_FIELDS = (
    "seed",
    "variant",
    "val_auc",
    "val_logloss",
    "test_auc",
    "test_logloss",
    "compression_ratio",
    "entropy",
    "empty_codes",
    "stage1_s",
    "quantize_s",
    "stage2_s",
)


def ablation_rows(results):
    rows = []
    for item in results:
        report = item["report"]
        q = report["quantizer"]
        rows.append(
            {
                "seed": item["seed"],
                "variant": item["variant"],
                "val_auc": report["metrics"]["val_auc"],
                "val_logloss": report["metrics"]["val_logloss"],
                "test_auc": report["metrics"]["test_auc"],
                "test_logloss": report["metrics"]["test_logloss"],
                "compression_ratio": report["memory"]["compression_ratio"],
                "entropy": None if q is None else q["entropy"],
                "empty_codes": None if q is None else q["empty_codes"],
                "stage1_s": report["timings"]["stage1_s"],
                "quantize_s": report["timings"]["quantize_s"],
                "stage2_s": report["timings"]["stage2_s"],
            }
        )
    return rows


ABLATION_SUMMARY_FIELDS = (
    "variant",
    "n_seeds",
    "test_auc_mean",
    "test_auc_std",
    "val_auc_mean",
    "test_logloss_mean",
    "val_logloss_mean",
    "compression_ratio",
    "entropy_mean",
    "quantize_s_mean",
)


def _mean_or_none(xs):
    vals = [x for x in xs if x is not None]
    return statistics.fmean(vals) if vals else None


def ablation_summary_rows(results):
    """One row per variant, averaged over seeds (the ablation-table shape)."""
    per_run = ablation_rows(results)
    order = []
    groups = {}
    for row in per_run:
        if row["variant"] not in groups:
            order.append(row["variant"])
            groups[row["variant"]] = []
        groups[row["variant"]].append(row)
    rows = []
    for variant in order:
        g = groups[variant]
        test_aucs = [r["test_auc"] for r in g if r["test_auc"] is not None]
        rows.append(
            {
                "variant": variant,
                "n_seeds": len(g),
                "test_auc_mean": _mean_or_none([r["test_auc"] for r in g]),
                "test_auc_std": statistics.pstdev(test_aucs) if len(test_aucs) > 1 else 0.0,
                "val_auc_mean": _mean_or_none([r["val_auc"] for r in g]),
                "test_logloss_mean": _mean_or_none([r["test_logloss"] for r in g]),
                "val_logloss_mean": _mean_or_none([r["val_logloss"] for r in g]),
                "compression_ratio": g[0]["compression_ratio"],
                "entropy_mean": _mean_or_none([r["entropy"] for r in g]),
                "quantize_s_mean": _mean_or_none([r["quantize_s"] for r in g]),
            }
        )
    return rows


CODE_HIST_FIELDS = ("field", "subspace", "code_id", "count")


def code_histogram_rows(codebook, field=None, top_n=None):
    """Code-usage rows for every subspace, optionally restricted to a field."""
    rows = []
    for subspace in range(codebook.n_subspaces):
        ids, counts = code_distribution(codebook, field=field, subspace=subspace, top_n=top_n)
        for cid, cnt in zip(ids, counts):
            rows.append(
                {
                    "field": field if field is not None else "all",
                    "subspace": subspace,
                    "code_id": int(cid),
                    "count": int(cnt),
                }
            )
    return rows
