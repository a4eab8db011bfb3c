"""Command-line interface.

Subcommands mirror the pipeline stages (prepare / pretrain / quantize /
train) plus end-to-end drivers (run / ablate / sweep / latency) and an
artifact inspector. Heavy imports happen inside the handlers so --threads
can pin the BLAS thread pools before numpy loads.

Exit codes: 0 ok, 2 usage, 3 missing file or artifact, 4 unreadable or
mismatched artifact, 5 invalid config or input schema, 6 training diverged,
1 unexpected error.
"""

import argparse
import os
import sys

VOCAB_FILE = "vocab.mecvoc"
SPLITS_FILE = "splits.mecspl"
STAGE1_MODEL_FILE = "stage1_model.mecmdl"
STAGE1_INFO_FILE = "stage1.json"
CODEBOOK_FILE = "codebook.meccbk"
QUANT_INFO_FILE = "quantize.json"
MODEL_FILE = "model.mecmdl"
REPORT_FILE = "report.json"
ECHO_FILE = "config.yaml"


def say(msg=""):
    print(msg, flush=True)


def _set_threads(n):
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
        "VECLIB_MAXIMUM_THREADS",
    ):
        os.environ[var] = str(n)


def _load_cfg(args):
    from mec.config import load_config, validate_config

    cfg = load_config(args.config, args.set or [])
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = int(args.seed)
        validate_config(cfg)
    return cfg


def _outdir(args):
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def _need(path, hint):
    if not os.path.exists(path):
        raise FileNotFoundError(f"{path} not found; {hint}")
    return path


def _write_echo(cfg, out):
    from mec.config import config_echo

    with open(os.path.join(out, ECHO_FILE), "w", encoding="utf-8") as fh:
        fh.write(config_echo(cfg))


def _read_json(path):
    import json

    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _write_json(obj, path):
    import json

    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


# ---------------- handlers ----------------


def cmd_prepare(args):
    from mec.artifacts import save_splits, save_vocabulary
    from mec.pipeline import load_dataset

    cfg = _load_cfg(args)
    out = _outdir(args)
    split, vocab, numeric_names = load_dataset(cfg)
    save_vocabulary(vocab, os.path.join(out, VOCAB_FILE))
    save_splits(split, os.path.join(out, SPLITS_FILE))
    _write_echo(cfg, out)
    say(f"prepared {VOCAB_FILE} and {SPLITS_FILE} in {out}")
    say(f"records: train={split.train.n_records} val={split.val.n_records} test={split.test.n_records}")
    say(f"fields: {vocab.n_fields} categorical ({vocab.total_features} features), {len(numeric_names)} numeric")
    return 0


def cmd_pretrain(args):
    from mec.artifacts import load_splits, load_vocabulary, save_model
    from mec.pipeline import pretrain_stage

    cfg = _load_cfg(args)
    out = _outdir(args)
    vocab = load_vocabulary(_need(os.path.join(out, VOCAB_FILE), "run `mec prepare` first"))
    split = load_splits(_need(os.path.join(out, SPLITS_FILE), "run `mec prepare` first"))
    numeric_names = list(cfg["data"]["csv"]["numerics"]) if cfg["data"]["source"] == "csv" else []
    pre = pretrain_stage(cfg, split, vocab, numeric_names)
    save_model(pre["model"], os.path.join(out, STAGE1_MODEL_FILE))
    _write_json(
        {"history": pre["history"], "best_epoch": pre["best_epoch"], "seconds": pre["seconds"]},
        os.path.join(out, STAGE1_INFO_FILE),
    )
    _write_echo(cfg, out)
    last = pre["history"][-1]
    say(f"stage-1 {cfg['stage1']['model']}: {len(pre['history'])} epochs, best epoch {pre['best_epoch']}")
    if "val_auc" in last:
        say(f"val auc {last['val_auc']:.4f} logloss {last['val_logloss']:.4f}")
    say(f"wrote {STAGE1_MODEL_FILE}")
    return 0


def cmd_quantize(args):
    from mec.artifacts import load_model, load_vocabulary, save_codebook
    from mec.errors import ConfigError
    from mec.metrics import weighted_code_entropy
    from mec.pipeline import quantize_stage

    cfg = _load_cfg(args)
    out = _outdir(args)
    variant = args.variant or cfg["variant"]
    if variant == "dense_baseline":
        raise ConfigError("dense_baseline skips quantization; pick a quantized variant")
    vocab = load_vocabulary(_need(os.path.join(out, VOCAB_FILE), "run `mec prepare` first"))
    s1 = load_model(_need(os.path.join(out, STAGE1_MODEL_FILE), "run `mec pretrain` first"))
    quant = quantize_stage(cfg, s1.export_embeddings(), vocab, variant)
    save_codebook(quant["codebook"], os.path.join(out, CODEBOOK_FILE))
    _write_json(
        {
            "variant": variant,
            "alpha": quant["alpha"],
            "beta": quant["beta"],
            "weighting": quant["weighting"],
            "trace": quant["trace"],
            "entropy": weighted_code_entropy(quant["codebook"]),
            "seconds": quant["seconds"],
        },
        os.path.join(out, QUANT_INFO_FILE),
    )
    _write_echo(cfg, out)
    last = quant["trace"][-1]
    say(f"quantized as {variant}: recon {last['recon']:.5f}, empty codes {last['empty_codes']}")
    say(f"wrote {CODEBOOK_FILE}")
    return 0


def cmd_train(args):
    from mec.artifacts import load_codebook, load_model, load_splits, load_vocabulary, save_model, save_report
    from mec.metrics import weighted_code_entropy
    from mec.pipeline import (
        account_memory,
        assemble_report,
        dataset_summary,
        evaluate_model,
        other_param_bytes,
        quantizer_dispatch,
        retrain_stage,
    )

    cfg = _load_cfg(args)
    out = _outdir(args)
    variant = args.variant or cfg["variant"]
    vocab = load_vocabulary(_need(os.path.join(out, VOCAB_FILE), "run `mec prepare` first"))
    split = load_splits(_need(os.path.join(out, SPLITS_FILE), "run `mec prepare` first"))
    numeric_names = list(cfg["data"]["csv"]["numerics"]) if cfg["data"]["source"] == "csv" else []

    stage1_info = None
    s1_path = os.path.join(out, STAGE1_INFO_FILE)
    if os.path.exists(s1_path):
        info = _read_json(s1_path)
        stage1_info = {"history": info["history"], "best_epoch": info["best_epoch"]}
        stage1_s = info.get("seconds", 0.0)
    else:
        stage1_s = 0.0

    quant = None
    quant_info = None
    quant_s = 0.0
    if variant == "dense_baseline":
        s1 = load_model(_need(os.path.join(out, STAGE1_MODEL_FILE), "run `mec pretrain` first"))
        pre = {"table": s1.export_embeddings()}
    else:
        codebook = load_codebook(_need(os.path.join(out, CODEBOOK_FILE), "run `mec quantize` first"))
        quant = {"codebook": codebook}
        pre = None
        qi_path = os.path.join(out, QUANT_INFO_FILE)
        if os.path.exists(qi_path):
            info = _read_json(qi_path)
            quant_info = {k: info[k] for k in ("alpha", "beta", "weighting", "trace", "entropy")}
            quant_s = info.get("seconds", 0.0)
        else:
            alpha, beta, weighting = quantizer_dispatch(variant, cfg["quantizer"])
            quant_info = {
                "alpha": alpha,
                "beta": beta,
                "weighting": weighting,
                "trace": [],
                "entropy": weighted_code_entropy(codebook),
            }

    post = retrain_stage(cfg, split, vocab, numeric_names, variant, pre, quant)
    model = post["model"]
    val_auc, val_ll = evaluate_model(model, split.val)
    test_auc, test_ll = evaluate_model(model, split.test)
    report = assemble_report(
        cfg,
        variant,
        dataset_summary(split, vocab, numeric_names),
        stage1_info=stage1_info,
        quant_info=quant_info,
        stage2_info={"history": post["history"], "best_epoch": post["best_epoch"]},
        metrics={"val_auc": val_auc, "val_logloss": val_ll, "test_auc": test_auc, "test_logloss": test_ll},
        memory=account_memory(
            vocab.total_features,
            cfg["embedding_dim"],
            cfg["quantizer"]["M"],
            cfg["quantizer"]["K"],
            quantized=variant != "dense_baseline",
            other_param_bytes=other_param_bytes(model),
        ),
        timings={
            "stage1_s": stage1_s,
            "quantize_s": quant_s,
            "stage2_s": post["seconds"],
            "total_s": stage1_s + quant_s + post["seconds"],
        },
    )
    report["artifacts"] = {"model": MODEL_FILE}
    save_model(model, os.path.join(out, MODEL_FILE))
    report = save_report(report, os.path.join(out, REPORT_FILE))
    _write_echo(cfg, out)
    say(f"stage-2 {cfg['stage2']['model']} ({variant}): val auc {val_auc:.4f}" if val_auc else "stage-2 done")
    say(f"wrote {MODEL_FILE} and {REPORT_FILE}")
    return 0


def cmd_run(args):
    from mec.artifacts import save_codebook, save_model, save_report
    from mec.pipeline import load_dataset, run_variant

    cfg = _load_cfg(args)
    out = _outdir(args)
    variant = args.variant or cfg["variant"]
    split, vocab, numeric_names = load_dataset(cfg)
    report, bundle = run_variant(cfg, split, vocab, numeric_names, variant=variant)
    artifacts = {"model": MODEL_FILE, "report": REPORT_FILE}
    if bundle["quant"] is not None:
        save_codebook(bundle["quant"]["codebook"], os.path.join(out, CODEBOOK_FILE))
        artifacts["codebook"] = CODEBOOK_FILE
    save_model(bundle["post"]["model"], os.path.join(out, MODEL_FILE))
    report["artifacts"] = artifacts
    report = save_report(report, os.path.join(out, REPORT_FILE))
    _write_echo(cfg, out)
    m = report["metrics"]
    mem = report["memory"]
    say(f"variant {variant} seed {cfg['seed']}")
    if m["val_auc"] is not None:
        say(f"val  auc {m['val_auc']:.4f} logloss {m['val_logloss']:.4f}")
    if m["test_auc"] is not None:
        say(f"test auc {m['test_auc']:.4f} logloss {m['test_logloss']:.4f}")
    say(f"compression ratio {mem['compression_ratio']:.2f}")
    say(f"fingerprint {report['fingerprint']}")
    say(f"wrote {', '.join(sorted(artifacts.values()))} in {out}")
    return 0


def _parse_list(text, cast):
    return [cast(x) for x in text.split(",") if x.strip() != ""]


def cmd_ablate(args):
    from mec.artifacts import save_report
    from mec.evalreport import (
        ABLATION_FIELDS,
        ABLATION_SUMMARY_FIELDS,
        ablation_rows,
        ablation_summary_rows,
        write_csv,
    )
    from mec.pipeline import ablate

    cfg = _load_cfg(args)
    out = _outdir(args)
    variants = _parse_list(args.variants, str) if args.variants else None
    if args.seeds:
        seeds = _parse_list(args.seeds, int)
    else:
        seeds = [cfg["seed"] + i for i in range(args.n_seeds)]
    say(f"ablation over seeds {seeds}")
    results = ablate(cfg, variants=variants, seeds=seeds, progress=say if not args.quiet else None)
    reports_dir = os.path.join(out, "reports")
    os.makedirs(reports_dir, exist_ok=True)
    for item in results:
        path = os.path.join(reports_dir, f"{item['variant']}_seed{item['seed']}.json")
        save_report(item["report"], path)
    summary = ablation_summary_rows(results)
    write_csv(os.path.join(out, "ablation.csv"), ABLATION_SUMMARY_FIELDS, summary)
    write_csv(os.path.join(out, "ablation_runs.csv"), ABLATION_FIELDS, ablation_rows(results))
    _write_echo(cfg, out)
    say(f"wrote {len(results)} reports, ablation.csv and ablation_runs.csv in {out}")
    say(f"{'variant':15s} {'test_auc':>9s} {'std':>7s} {'ratio':>7s}")
    for row in summary:
        auc = "" if row["test_auc_mean"] is None else f"{row['test_auc_mean']:9.4f}"
        say(f"{row['variant']:15s} {auc:>9s} {row['test_auc_std']:7.4f} {row['compression_ratio']:7.2f}")
    return 0


def cmd_sweep(args):
    from mec.evalreport import SWEEP_FIELDS, sweep, write_csv

    cfg = _load_cfg(args)
    out = _outdir(args)
    rows = sweep(
        cfg,
        alphas=_parse_list(args.alphas, float) if args.alphas else None,
        betas=_parse_list(args.betas, float) if args.betas else None,
        ms=_parse_list(args.Ms, int) if args.Ms else None,
        ks=_parse_list(args.Ks, int) if args.Ks else None,
        progress=say if not args.quiet else None,
    )
    write_csv(os.path.join(out, "sweep.csv"), SWEEP_FIELDS, rows)
    _write_echo(cfg, out)
    say(f"wrote sweep.csv with {len(rows)} rows in {out}")
    for row in rows:
        if row.get("skip_reason"):
            say(f"  skipped alpha={row['alpha']} beta={row['beta']} M={row['M']} K={row['K']}: {row['skip_reason']}")
    return 0


def cmd_latency(args):
    from mec.evalreport import LATENCY_FIELDS, latency_harness, write_csv

    cfg = _load_cfg(args)
    out = _outdir(args)
    variants = _parse_list(args.variants, str) if args.variants else None
    rows = latency_harness(cfg, variants=variants, reps=args.reps, progress=say if not args.quiet else None)
    write_csv(os.path.join(out, "latency.csv"), LATENCY_FIELDS, rows)
    _write_echo(cfg, out)
    say(f"{'variant':15s} {'stage1_ep_s':>12s} {'quant_ep_s':>12s} {'total_s':>12s}")
    for row in rows:
        say(
            f"{row['variant']:15s} {row['stage1_epoch_mean_s']:12.4f} {row['quantize_epoch_mean_s']:12.4f} "
            f"{row['stage1_total_mean_s']:12.4f}"
        )
    say(f"wrote latency.csv in {out}")
    return 0


def cmd_inspect(args):
    import yaml

    from mec.artifacts import describe_artifact, sniff_kind

    _need(args.artifact, "nothing to inspect")
    info = describe_artifact(args.artifact)
    say(yaml.safe_dump(info, sort_keys=True, default_flow_style=False).rstrip())
    if args.histogram and info["kind"] == "codebook":
        from mec.artifacts import load_codebook
        from mec.evalreport import CODE_HIST_FIELDS, code_histogram_rows, write_csv

        rows = code_histogram_rows(load_codebook(args.artifact), field=args.field, top_n=args.top_n)
        write_csv(args.histogram, CODE_HIST_FIELDS, rows)
        say(f"wrote code histogram to {args.histogram}")
    elif args.histogram:
        say(f"histogram export only applies to codebooks, not {info['kind']}")
    return 0


# ---------------- parser ----------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mec",
        description="Two-stage embedding compression for CTR models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", help="YAML config file (defaults apply when omitted)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value (dotted path)")
        p.add_argument("--seed", type=int, help="override the top-level seed")
        p.add_argument("--threads", type=int, help="pin BLAS/OpenMP thread pools")
        p.add_argument("--quiet", action="store_true", help="suppress progress lines")
        if needs_out:
            p.add_argument("--out", help="output directory (default: current)")

    p = sub.add_parser("prepare", help="build vocabulary and encoded splits")
    common(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("pretrain", help="stage 1: train the dense CTR model")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("quantize", help="stage 1b: learn the codebook")
    common(p)
    p.add_argument("--variant", help="quantizer variant (default: config)")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("train", help="stage 2: retrain on the compressed table")
    common(p)
    p.add_argument("--variant", help="variant (default: config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("run", help="full pipeline in one process")
    common(p)
    p.add_argument("--variant", help="variant (default: config)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="paired runs across variants and seeds")
    common(p)
    p.add_argument("--variants", help="comma-separated variant list (default: all)")
    p.add_argument("--seeds", help="comma-separated seed list")
    p.add_argument("--n-seeds", type=int, default=5, help="seed count when --seeds is absent")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="grid over quantizer hyper-parameters")
    common(p)
    p.add_argument("--alphas", help="comma-separated alpha values")
    p.add_argument("--betas", help="comma-separated beta values")
    p.add_argument("--Ms", help="comma-separated M values")
    p.add_argument("--Ks", help="comma-separated K values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("latency", help="time stage-1 phases per variant")
    common(p)
    p.add_argument("--variants", help="comma-separated variant list (default: all)")
    p.add_argument("--reps", type=int, default=10, help="repetitions (default 10)")
    p.set_defaults(func=cmd_latency)

    p = sub.add_parser("inspect", help="describe an artifact file")
    p.add_argument("artifact", help="path to any artifact")
    p.add_argument("--histogram", help="write a code-usage CSV (codebooks only)")
    p.add_argument("--field", help="restrict the histogram to one field")
    p.add_argument("--top-n", type=int, help="truncate the histogram")
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", None):
        _set_threads(args.threads)

    from mec.errors import (
        ArtifactError,
        ConfigError,
        SchemaError,
        TrainingDivergedError,
    )

    try:
        return args.func(args) or 0
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (ConfigError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"batch index: {exc.batch_index}", file=sys.stderr)
        for name, norm in sorted(exc.param_norms.items()):
            print(f"  |{name}| = {norm:.6g}", file=sys.stderr)
        return 6
    except Exception as exc:  # pragma: no cover - unexpected
        import traceback

        traceback.print_exc()
        print(f"unexpected error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
