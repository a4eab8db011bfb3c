"""Run configuration: defaults, YAML loading, dotted overrides, validation.

A config is a plain nested dict whose structure mirrors DEFAULTS. Unknown
keys are rejected rather than ignored so typos fail loudly; validation also
cross-checks values that must agree (embedding dim divisible by M, model
variants that can use an embedding source, ...).
"""

import copy

import yaml

from mec import VARIANTS
from mec.errors import ConfigError

STAGE1_MODELS = ("FM", "DeepFM-lite")
STAGE2_MODELS = ("FM", "DeepFM-lite", "PNN-lite")

DEFAULTS = {
    "seed": 7,
    "variant": "MEC",
    "embedding_dim": 16,
    "data": {
        "source": "synthetic",
        "seed": None,  # fixes the dataset independently of the top-level seed
        "split_ratios": [0.7, 0.2, 0.1],
        "min_count": 1,
        "synthetic": {
            "n_samples": 50000,
            "n_fields": 5,
            "vocab_per_field": 5000,
            "zipf_exponent": 1.5,
            "noise": 0.1,
            "hidden_dim": 16,
        },
        "csv": {
            "path": None,
            "label": None,
            "categoricals": [],
            "numerics": [],
            "delimiter": ",",
            "multivalue_delimiter": "|",
            "has_header": True,
        },
    },
    "stage1": {"model": "FM", "epochs": 16, "batch_size": 256, "lr": 0.003, "l2": 5e-4, "patience": 3},
    "stage2": {
        "model": "PNN-lite",
        "epochs": 10,
        "batch_size": 512,
        "lr": 0.003,
        "l2": 0.0,
        "patience": 2,
        "mlp_layers": [64, 32],
    },
    "quantizer": {
        "M": 4,
        "K": 64,
        "alpha": 1.0,
        "beta": 0.05,
        "rho": 0.3,
        "epsilon": 1e-10,
        "tau": 0.002,
        "n_negatives": 4,
        "epochs": 30,
        "batch_size": 32768,
        "lr": 0.05,
        "update_rule": "adam",
        "init_sample": 256,
        "reg_sample": 128,
    },
}


def default_config():
    return copy.deepcopy(DEFAULTS)


def merge_config(base, override, path=""):
    """Deep merge, rejecting keys that do not exist in the base structure."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {here!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {here!r} expects a mapping, got {type(value).__name__}")
            out[key] = merge_config(base[key], value, here)
        else:
            out[key] = copy.deepcopy(value)
    return out


def apply_overrides(cfg, assignments):
    """Apply 'dotted.path=value' strings; values are parsed as YAML scalars."""
    out = copy.deepcopy(cfg)
    for text in assignments:
        if "=" not in text:
            raise ConfigError(f"override {text!r} must look like section.key=value")
        dotted, raw = text.split("=", 1)
        keys = dotted.strip().split(".")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {text!r}: unparsable value ({exc})") from None
        node = out
        ref = DEFAULTS
        for k in keys[:-1]:
            if not isinstance(ref, dict) or k not in ref:
                raise ConfigError(f"unknown config key {dotted!r}")
            node = node.setdefault(k, {})
            ref = ref[k]
        leaf = keys[-1]
        if not isinstance(ref, dict) or leaf not in ref:
            raise ConfigError(f"unknown config key {dotted!r}")
        if isinstance(ref[leaf], dict):
            raise ConfigError(f"config key {dotted!r} is a section, not a value")
        node[leaf] = value
    return out


def load_config(path=None, overrides=()):
    """Defaults, then the YAML file, then --set overrides; validated."""
    cfg = default_config()
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        cfg = merge_config(cfg, loaded)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    validate_config(cfg)
    return cfg


def config_echo(cfg):
    """Canonical YAML text of the resolved config."""
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)


def _positive(cfg, dotted, allow_zero=False):
    node = cfg
    for k in dotted.split("."):
        node = node[k]
    ok = node >= 0 if allow_zero else node > 0
    if not ok:
        raise ConfigError(f"{dotted} must be {'>= 0' if allow_zero else '> 0'}, got {node}")
    return node


def validate_config(cfg):
    if cfg["variant"] not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {cfg['variant']!r}")
    d = cfg["embedding_dim"]
    if not isinstance(d, int) or d < 1:
        raise ConfigError(f"embedding_dim must be a positive integer, got {d!r}")

    data = cfg["data"]
    if data["source"] not in ("synthetic", "csv"):
        raise ConfigError(f"data.source must be synthetic or csv, got {data['source']!r}")
    ratios = data["split_ratios"]
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"data.split_ratios must be 3 non-negative values summing to 1, got {ratios}")
    if data["min_count"] < 1:
        raise ConfigError(f"data.min_count must be >= 1, got {data['min_count']}")
    if data["source"] == "csv":
        csv_cfg = data["csv"]
        if not csv_cfg["path"]:
            raise ConfigError("data.csv.path is required when data.source is csv")
        if csv_cfg["label"] is None or not csv_cfg["categoricals"]:
            raise ConfigError("data.csv needs a label column and at least one categorical column")
    else:
        syn = data["synthetic"]
        for key in ("n_samples", "n_fields", "vocab_per_field", "hidden_dim"):
            if syn[key] < 1:
                raise ConfigError(f"data.synthetic.{key} must be >= 1, got {syn[key]}")
        if not 0.0 <= syn["noise"] <= 0.5:
            raise ConfigError(f"data.synthetic.noise must be in [0, 0.5], got {syn['noise']}")
        if syn["zipf_exponent"] <= 0:
            raise ConfigError(f"data.synthetic.zipf_exponent must be > 0, got {syn['zipf_exponent']}")

    if cfg["stage1"]["model"] not in STAGE1_MODELS:
        raise ConfigError(f"stage1.model must be one of {STAGE1_MODELS}, got {cfg['stage1']['model']!r}")
    if cfg["stage2"]["model"] not in STAGE2_MODELS:
        raise ConfigError(
            f"stage2.model must be one of {STAGE2_MODELS} (LR has no embeddings to retrain), "
            f"got {cfg['stage2']['model']!r}"
        )
    for stage in ("stage1", "stage2"):
        for key in ("epochs", "batch_size"):
            _positive(cfg, f"{stage}.{key}")
        for key in ("lr",):
            _positive(cfg, f"{stage}.{key}")
        for key in ("l2",):
            _positive(cfg, f"{stage}.{key}", allow_zero=True)
        if cfg[stage]["patience"] < 0:
            raise ConfigError(f"{stage}.patience must be >= 0")
    if any(x < 1 for x in cfg["stage2"]["mlp_layers"]):
        raise ConfigError("stage2.mlp_layers entries must be >= 1")

    q = cfg["quantizer"]
    if d % q["M"] != 0:
        raise ConfigError(f"d mod M != 0 (embedding_dim={d}, M={q['M']})")
    for key in ("M", "K", "tau", "epsilon", "n_negatives", "epochs", "batch_size", "lr", "init_sample", "reg_sample"):
        _positive(cfg, f"quantizer.{key}")
    for key in ("alpha", "beta"):
        _positive(cfg, f"quantizer.{key}", allow_zero=True)
    if not 0.0 <= q["rho"] <= 1.0:
        raise ConfigError(f"quantizer.rho must be in [0, 1], got {q['rho']}")
    if q["update_rule"] not in ("adam", "centroid"):
        raise ConfigError(f"quantizer.update_rule must be adam or centroid, got {q['update_rule']!r}")
    if q["update_rule"] == "centroid" and (q["alpha"] != 0.0 or q["beta"] != 0.0):
        raise ConfigError("quantizer.update_rule=centroid requires alpha=0 and beta=0")
    if q["init_sample"] < q["K"]:
        raise ConfigError(f"quantizer.init_sample must be >= K ({q['init_sample']} < {q['K']})")
    return cfg
