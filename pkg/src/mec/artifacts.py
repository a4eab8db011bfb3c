"""Artifact formats: vocabulary (text), codebook + model + splits (binary),
run report (JSON).

Every binary format opens with an 8-byte tag (7 ASCII chars + NUL) and is
written in little-endian with fixed section order, so identical inputs give
byte-identical files. Readers raise BadMagicError / TruncatedArtifactError /
ShapeMismatchError for the three corruption classes.

Format tags: MECVOC1 (vocabulary), MECCBK1 (codebook), MECMDL1 (model),
MECSPL1 (encoded splits); reports carry "format": "mec-report/1".
"""

import copy
import hashlib
import json
import struct
import urllib.parse

import numpy as np

from mec.data import DatasetSplit, EncodedDataset, FeatureVocabulary
from mec.errors import BadMagicError, ShapeMismatchError, TruncatedArtifactError
from mec.models import CodebookEmbeddingSource, CtrModel, DenseEmbeddingSource
from mec.quantizer import Codebook

VOCAB_MAGIC = "MECVOC1"
CODEBOOK_MAGIC = b"MECCBK1\x00"
MODEL_MAGIC = b"MECMDL1\x00"
SPLITS_MAGIC = b"MECSPL1\x00"
REPORT_FORMAT = "mec-report/1"

_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8", 3: "|u1"}
_DTYPE_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


# ---------------- low-level binary helpers ----------------


class _Reader:
    def __init__(self, data, what):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedArtifactError(
                f"{self.what}: needed {n} bytes at offset {self.pos}, file ends at {len(self.data)}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self):
        return self.take(1)[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def string(self):
        n = struct.unpack("<H", self.take(2))[0]
        return self.take(n).decode("utf-8")

    def array(self):
        code = self.u8()
        if code not in _DTYPES:
            raise ShapeMismatchError(f"{self.what}: unknown dtype code {code}")
        ndim = self.u8()
        shape = tuple(self.u64() for _ in range(ndim))
        dt = np.dtype(_DTYPES[code])
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize if ndim else dt.itemsize
        raw = self.take(n_bytes)
        return np.frombuffer(raw, dtype=dt).reshape(shape).copy()

    def expect_eof(self):
        if self.pos != len(self.data):
            raise ShapeMismatchError(f"{self.what}: {len(self.data) - self.pos} trailing bytes after payload")


def _w_u8(buf, x):
    buf.append(struct.pack("<B", x))


def _w_u32(buf, x):
    buf.append(struct.pack("<I", x))


def _w_u64(buf, x):
    buf.append(struct.pack("<Q", x))


def _w_string(buf, s):
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError("string too long for format")
    buf.append(struct.pack("<H", len(raw)))
    buf.append(raw)


def _w_array(buf, a):
    a = np.ascontiguousarray(a)
    dt = np.dtype(a.dtype.str.replace(">", "<")) if a.dtype.byteorder == ">" else a.dtype
    if dt not in _DTYPE_CODES:
        raise ValueError(f"unsupported artifact dtype {a.dtype}")
    _w_u8(buf, _DTYPE_CODES[dt])
    _w_u8(buf, a.ndim)
    for s in a.shape:
        _w_u64(buf, s)
    buf.append(a.astype(dt, copy=False).tobytes(order="C"))


def _check_magic(data, magic, what):
    if len(data) < len(magic):
        raise TruncatedArtifactError(f"{what}: file shorter than the {len(magic)}-byte tag")
    if data[: len(magic)] != magic:
        raise BadMagicError(f"{what}: bad magic {data[:len(magic)]!r}, expected {magic!r}")


# ---------------- vocabulary (text) ----------------


def _quote(s):
    return urllib.parse.quote(s, safe="")


def _unquote(s):
    return urllib.parse.unquote(s)


def save_vocabulary(vocab, path):
    """Plain-text format: one header, then per field a header line, one line
    per kept token in id order, and the OOV count."""
    lines = [VOCAB_MAGIC, f"n_fields {vocab.n_fields}"]
    for f in range(vocab.n_fields):
        tokens = list(vocab.token_ids[f].items())
        tokens.sort(key=lambda kv: kv[1])
        lines.append(f"field {_quote(vocab.field_names[f])} {len(tokens)}")
        for tok, tid in tokens:
            lines.append(f"{vocab.counts[f][tid]} {_quote(tok)}")
        lines.append(f"oov {vocab.counts[f][-1]}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_vocabulary(path):
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise TruncatedArtifactError("vocabulary: empty file")
    if lines[0] != VOCAB_MAGIC:
        raise BadMagicError(f"vocabulary: bad magic {lines[0]!r}, expected {VOCAB_MAGIC!r}")
    it = iter(lines[1:])

    def next_line(ctx):
        try:
            return next(it)
        except StopIteration:
            raise TruncatedArtifactError(f"vocabulary: file ends inside {ctx}") from None

    head = next_line("header")
    if not head.startswith("n_fields "):
        raise ShapeMismatchError(f"vocabulary: expected n_fields line, got {head!r}")
    n_fields = int(head.split()[1])
    names, token_ids, counts = [], [], []
    for _ in range(n_fields):
        parts = next_line("field header").split()
        if len(parts) != 3 or parts[0] != "field":
            raise ShapeMismatchError(f"vocabulary: bad field header {parts!r}")
        names.append(_unquote(parts[1]))
        n_tokens = int(parts[2])
        ids, cnt = {}, []
        for tid in range(n_tokens):
            c, tok = next_line("token list").split(" ", 1)
            ids[_unquote(tok)] = tid
            cnt.append(int(c))
        oov = next_line("oov line").split()
        if len(oov) != 2 or oov[0] != "oov":
            raise ShapeMismatchError(f"vocabulary: bad oov line {oov!r}")
        cnt.append(int(oov[1]))
        token_ids.append(ids)
        counts.append(np.asarray(cnt, dtype=np.int64))
    if list(it):
        raise ShapeMismatchError("vocabulary: trailing lines after last field")
    return FeatureVocabulary(names, token_ids, counts)


# ---------------- codebook (binary) ----------------


def code_bits(k):
    """Bits per stored code: ceil(log2 K), floored at 1 for K=1."""
    return max(1, int(np.ceil(np.log2(k)))) if k > 1 else 1


def _pack_codes(codes, k):
    g, m = codes.shape
    bits = code_bits(k)
    shifts = np.arange(bits - 1, -1, -1, dtype=np.int64)
    bitmat = ((codes[:, :, None] >> shifts) & 1).astype(np.uint8).reshape(g, m * bits)
    return np.packbits(bitmat, axis=1)


def _unpack_codes(raw, g, m, k):
    bits = code_bits(k)
    row_bytes = (m * bits + 7) // 8
    mat = np.unpackbits(raw.reshape(g, row_bytes), axis=1)[:, : m * bits]
    powers = 1 << np.arange(bits - 1, -1, -1, dtype=np.int64)
    return (mat.reshape(g, m, bits) * powers).sum(axis=2).astype(np.int64)


def save_codebook(codebook, path):
    with open(path, "wb") as fh:
        fh.write(codebook_bytes(codebook))


def codebook_bytes(codebook):
    buf = [CODEBOOK_MAGIC]
    _w_u32(buf, codebook.n_subspaces)
    _w_u32(buf, codebook.n_codewords)
    _w_u32(buf, codebook.dim)
    _w_u32(buf, codebook.sub_dim)
    _w_u32(buf, len(codebook.field_names))
    for f, name in enumerate(codebook.field_names):
        _w_string(buf, name)
        _w_u64(buf, int(codebook.field_offsets[f + 1] - codebook.field_offsets[f]))
    buf.append(np.ascontiguousarray(codebook.codewords, dtype="<f4").tobytes())
    buf.append(_pack_codes(codebook.codes, codebook.n_codewords).tobytes())
    buf.append(np.ascontiguousarray(codebook.weights, dtype=np.uint8).tobytes())
    return b"".join(buf)


def load_codebook(path):
    with open(path, "rb") as fh:
        return codebook_from_bytes(fh.read())


def codebook_from_bytes(data):
    _check_magic(data, CODEBOOK_MAGIC, "codebook")
    r = _Reader(data, "codebook")
    r.take(len(CODEBOOK_MAGIC))
    m, k, d, dm = r.u32(), r.u32(), r.u32(), r.u32()
    if m * dm != d:
        raise ShapeMismatchError(f"codebook: M*sub_dim != d ({m}*{dm} != {d})")
    n_fields = r.u32()
    names, sizes = [], []
    for _ in range(n_fields):
        names.append(r.string())
        sizes.append(r.u64())
    offsets = np.concatenate(([0], np.cumsum(sizes))).astype(np.int64)
    g = int(offsets[-1])
    cw = np.frombuffer(r.take(m * k * dm * 4), dtype="<f4").reshape(m, k, dm).copy()
    row_bytes = (m * code_bits(k) + 7) // 8
    raw = np.frombuffer(r.take(g * row_bytes), dtype=np.uint8)
    codes = _unpack_codes(raw, g, m, k)
    if g and codes.max() >= k:
        raise ShapeMismatchError(f"codebook: packed code id >= K ({codes.max()} >= {k})")
    weights = np.frombuffer(r.take(g), dtype=np.uint8).copy()
    r.expect_eof()
    return Codebook(names, offsets, cw, codes, weights)


def codebook_section_sizes(codebook):
    """Byte sizes of the payload sections: header+field table, codewords,
    packed codes, weights. The first entry is the format overhead."""
    header = len(CODEBOOK_MAGIC) + 5 * 4
    for name in codebook.field_names:
        header += 2 + len(name.encode("utf-8")) + 8
    cw = codebook.codewords.size * 4
    codes = codebook.n_features * ((codebook.n_subspaces * code_bits(codebook.n_codewords) + 7) // 8)
    weights = codebook.n_features
    return {"overhead": header, "codewords": cw, "codes": codes, "weights": weights}


# ---------------- model (binary) ----------------


def save_model(model, path):
    """Parameters are stored as little-endian float32 in sorted name order;
    codebook-backed models embed the full codebook (with the retrained
    codewords) so the file is self-contained."""
    buf = [MODEL_MAGIC]
    _w_string(buf, model.variant)
    kind = model.source.kind if model.uses_embeddings else "none"
    _w_string(buf, kind)
    meta = {
        "d": model.d,
        "field_names": model.field_names,
        "field_sizes": model.field_sizes,
        "numeric_names": model.numeric_names,
        "mlp_layers": list(model.mlp_layers),
    }
    raw_meta = json.dumps(meta, sort_keys=True).encode("utf-8")
    _w_u32(buf, len(raw_meta))
    buf.append(raw_meta)
    names = sorted(k for k in model.params if k != "codewords")
    _w_u32(buf, len(names))
    for name in names:
        _w_string(buf, name)
        _w_array(buf, model.params[name].astype("<f4"))
    if kind == "codebook":
        src = model.source
        cb = Codebook(
            src.field_names,
            src.field_offsets,
            src.codewords.astype(np.float32),
            src.codes,
            getattr(src, "weights", np.zeros(src.codes.shape[0], dtype=np.uint8)),
        )
        blob = codebook_bytes(cb)
        _w_u64(buf, len(blob))
        buf.append(blob)
    data = b"".join(buf)
    with open(path, "wb") as fh:
        fh.write(data)


def load_model(path):
    with open(path, "rb") as fh:
        data = fh.read()
    _check_magic(data, MODEL_MAGIC, "model")
    r = _Reader(data, "model")
    r.take(len(MODEL_MAGIC))
    variant = r.string()
    kind = r.string()
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    n_params = r.u32()
    params = {}
    for _ in range(n_params):
        name = r.string()
        params[name] = r.array().astype(np.float64)
    source = None
    if kind == "codebook":
        blob = r.take(r.u64())
        cb = codebook_from_bytes(blob)
        source = CodebookEmbeddingSource(cb.field_names, cb.field_offsets, cb.codes, cb.codewords.astype(np.float64))
        source.weights = cb.weights
        params["codewords"] = source.codewords
    elif kind == "dense":
        tables = []
        for name in meta["field_names"]:
            key = f"emb/{name}"
            if key not in params:
                raise ShapeMismatchError(f"model: missing embedding table {key}")
            tables.append(params[key])
        source = DenseEmbeddingSource(meta["field_names"], tables)
        for name, t in zip(meta["field_names"], source.tables):
            params[f"emb/{name}"] = t
    r.expect_eof()
    model = CtrModel(
        variant,
        meta["field_names"],
        meta["field_sizes"],
        meta["numeric_names"],
        meta["d"],
        source,
        tuple(meta["mlp_layers"]),
    )
    model.set_params(params)
    return model


def models_equal(a, b):
    """Bitwise equality of two models (variant, shapes, every parameter,
    and the frozen assignments for codebook-backed ones)."""
    if a.variant != b.variant or a.field_names != b.field_names or a.field_sizes != b.field_sizes:
        return False
    if a.numeric_names != b.numeric_names or a.d != b.d or a.mlp_layers != b.mlp_layers:
        return False
    if set(a.params) != set(b.params):
        return False
    for k in a.params:
        if not np.array_equal(a.params[k], b.params[k]):
            return False
    ka = a.source.kind if a.uses_embeddings else "none"
    kb = b.source.kind if b.uses_embeddings else "none"
    if ka != kb:
        return False
    if ka == "codebook" and not np.array_equal(a.source.codes, b.source.codes):
        return False
    return True


# ---------------- encoded splits (binary) ----------------


def save_splits(split, path):
    buf = [SPLITS_MAGIC]
    meta = {
        "field_names": split.train.field_names,
        "n_numeric": int(split.train.numeric.shape[1]),
        "ratios": list(split.ratios),
        "provenance": split.provenance,
    }
    raw_meta = json.dumps(meta, sort_keys=True).encode("utf-8")
    _w_u32(buf, len(raw_meta))
    buf.append(raw_meta)
    for part in (split.train, split.val, split.test):
        _w_u64(buf, part.n_records)
        _w_array(buf, part.labels)
        _w_array(buf, part.numeric)
        for f in range(part.n_fields):
            off = part.cat_offsets[f]
            _w_u8(buf, 0 if off is None else 1)
            _w_array(buf, part.cat_ids[f])
            if off is not None:
                _w_array(buf, off)
    with open(path, "wb") as fh:
        fh.write(b"".join(buf))


def load_splits(path):
    with open(path, "rb") as fh:
        data = fh.read()
    _check_magic(data, SPLITS_MAGIC, "splits")
    r = _Reader(data, "splits")
    r.take(len(SPLITS_MAGIC))
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    names = meta["field_names"]
    parts = []
    for _ in range(3):
        n = r.u64()
        labels = r.array()
        numeric = r.array()
        if labels.shape[0] != n or numeric.shape[0] != n:
            raise ShapeMismatchError("splits: record count disagrees with arrays")
        cat_ids, cat_offsets = [], []
        for _f in range(len(names)):
            ragged = r.u8()
            cat_ids.append(r.array())
            cat_offsets.append(r.array() if ragged else None)
        parts.append(EncodedDataset(names, cat_ids, cat_offsets, numeric, labels))
    r.expect_eof()
    return DatasetSplit(
        train=parts[0], val=parts[1], test=parts[2], ratios=tuple(meta["ratios"]), provenance=meta["provenance"]
    )


# ---------------- run report (JSON) ----------------

_WALL_CLOCK_TOP = ("created_unix", "timings")

_NUM_OR_NULL = {"type": ["number", "null"]}

_EPOCH_ENTRY = {
    "type": "object",
    "required": ["epoch", "train_loss"],
    "properties": {
        "epoch": {"type": "integer"},
        "train_loss": {"type": "number"},
        "seconds": {"type": "number"},
        "val_auc": _NUM_OR_NULL,
        "val_logloss": _NUM_OR_NULL,
    },
    "additionalProperties": False,
}

_STAGE_BLOCK = {
    "type": ["object", "null"],
    "required": ["model", "history", "best_epoch"],
    "properties": {
        "model": {"type": "string"},
        "history": {"type": "array", "items": _EPOCH_ENTRY},
        "best_epoch": {"type": "integer"},
    },
    "additionalProperties": False,
}

_TRACE_ENTRY = {
    "type": "object",
    "required": ["recon", "reg", "con", "total", "empty_codes"],
    "properties": {
        "recon": {"type": "number"},
        "reg": {"type": "number"},
        "con": {"type": "number"},
        "total": {"type": "number"},
        "empty_codes": {"type": "integer"},
        "seconds": {"type": "number"},
    },
    "additionalProperties": False,
}

# The run report is the one artifact downstream tooling consumes as data,
# so its shape is pinned here the same way the binary layouts are. Saved
# reports add "fingerprint" (and the CLI adds "artifacts"); both are
# optional so in-memory reports validate too.
REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": [
        "format",
        "created_unix",
        "variant",
        "seed",
        "backend",
        "config",
        "dataset",
        "stage1",
        "quantizer",
        "stage2",
        "metrics",
        "memory",
        "timings",
    ],
    "properties": {
        "format": {"const": REPORT_FORMAT},
        "created_unix": {"type": "number"},
        "variant": {"type": "string"},
        "seed": {"type": "integer"},
        "backend": {"enum": ["c", "py"]},
        "config": {"type": "object"},
        "dataset": {
            "type": "object",
            "required": [
                "n_train",
                "n_val",
                "n_test",
                "n_fields",
                "field_sizes",
                "n_numeric",
                "total_features",
            ],
            "properties": {
                "n_train": {"type": "integer"},
                "n_val": {"type": "integer"},
                "n_test": {"type": "integer"},
                "n_fields": {"type": "integer"},
                "field_sizes": {"type": "array", "items": {"type": "integer"}},
                "n_numeric": {"type": "integer"},
                "total_features": {"type": "integer"},
            },
            "additionalProperties": False,
        },
        "stage1": _STAGE_BLOCK,
        "quantizer": {
            "type": ["object", "null"],
            "required": ["M", "K", "alpha", "beta", "weighting", "trace", "entropy"],
            "properties": {
                "M": {"type": "integer"},
                "K": {"type": "integer"},
                "alpha": {"type": "number"},
                "beta": {"type": "number"},
                "weighting": {"enum": ["uniform", "log2", "raw"]},
                "trace": {"type": "array", "items": _TRACE_ENTRY},
                "entropy": {"type": "number"},
                "empty_codes": {"type": ["integer", "null"]},
            },
            "additionalProperties": False,
        },
        "stage2": _STAGE_BLOCK,
        "metrics": {
            "type": "object",
            "required": ["val_auc", "val_logloss", "test_auc", "test_logloss"],
            "properties": {
                "val_auc": _NUM_OR_NULL,
                "val_logloss": _NUM_OR_NULL,
                "test_auc": _NUM_OR_NULL,
                "test_logloss": _NUM_OR_NULL,
            },
            "additionalProperties": False,
        },
        "memory": {
            "type": "object",
            "required": [
                "dense_embedding_bytes",
                "codebook_bytes",
                "code_index_bytes",
                "total_compressed_bytes",
                "other_param_bytes",
                "compression_ratio",
            ],
            "properties": {
                "dense_embedding_bytes": {"type": "number"},
                "codebook_bytes": {"type": "number"},
                "code_index_bytes": {"type": "number"},
                "total_compressed_bytes": {"type": "number"},
                "other_param_bytes": {"type": "number"},
                "compression_ratio": {"type": "number"},
            },
            "additionalProperties": False,
        },
        "timings": {
            "type": "object",
            "required": ["stage1_s", "quantize_s", "stage2_s", "total_s"],
            "properties": {
                "stage1_s": {"type": "number"},
                "quantize_s": {"type": "number"},
                "stage2_s": {"type": "number"},
                "total_s": {"type": "number"},
            },
            "additionalProperties": False,
        },
        "artifacts": {"type": "object", "additionalProperties": {"type": "string"}},
        "fingerprint": {"type": "string", "pattern": "^sha256:[0-9a-f]{64}$"},
    },
    "additionalProperties": False,
}


def _scrubbed(report):
    out = copy.deepcopy(report)
    for key in _WALL_CLOCK_TOP:
        out.pop(key, None)
    for stage in ("stage1", "stage2"):
        block = out.get(stage)
        if isinstance(block, dict):
            for entry in block.get("history", []):
                entry.pop("seconds", None)
    q = out.get("quantizer")
    if isinstance(q, dict):
        for entry in q.get("trace", []):
            if isinstance(entry, dict):
                entry.pop("seconds", None)
    out.pop("fingerprint", None)
    return out


def report_fingerprint(report):
    """sha256 over the canonical JSON with wall-clock fields removed."""
    canon = json.dumps(_scrubbed(report), sort_keys=True).encode("utf-8")
    return "sha256:" + hashlib.sha256(canon).hexdigest()


def save_report(report, path):
    report = dict(report)
    report["fingerprint"] = report_fingerprint(report)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return report


def load_report(path):
    with open(path, encoding="utf-8") as fh:
        report = json.load(fh)
    if report.get("format") != REPORT_FORMAT:
        raise BadMagicError(f"report: format {report.get('format')!r}, expected {REPORT_FORMAT!r}")
    return report


# ---------------- inspection ----------------


def sniff_kind(path):
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head == CODEBOOK_MAGIC:
        return "codebook"
    if head == MODEL_MAGIC:
        return "model"
    if head == SPLITS_MAGIC:
        return "splits"
    if head.startswith(VOCAB_MAGIC.encode("utf-8")):
        return "vocabulary"
    if head.lstrip().startswith(b"{"):
        return "report"
    raise BadMagicError(f"unrecognized artifact: leading bytes {head!r}")


def describe_artifact(path):
    """Human-oriented summary dict for any artifact on disk."""
    kind = sniff_kind(path)
    if kind == "vocabulary":
        v = load_vocabulary(path)
        return {
            "kind": kind,
            "fields": v.field_names,
            "sizes": v.sizes,
            "total_features": v.total_features,
        }
    if kind == "codebook":
        cb = load_codebook(path)
        sections = codebook_section_sizes(cb)
        return {
            "kind": kind,
            "fields": cb.field_names,
            "M": cb.n_subspaces,
            "K": cb.n_codewords,
            "d": cb.dim,
            "n_features": cb.n_features,
            "section_bytes": sections,
        }
    if kind == "model":
        m = load_model(path)
        return {
            "kind": kind,
            "variant": m.variant,
            "d": m.d,
            "fields": m.field_names,
            "numeric": m.numeric_names,
            "embedding_source": m.source.kind if m.uses_embeddings else "none",
            "n_parameters": int(sum(p.size for p in m.params.values())),
        }
    if kind == "splits":
        s = load_splits(path)
        return {
            "kind": kind,
            "fields": s.train.field_names,
            "sizes": {k: v.n_records for k, v in s.parts.items()},
            "ratios": list(s.ratios),
            "provenance": s.provenance,
        }
    report = load_report(path)
    return {
        "kind": "report",
        "variant": report.get("variant"),
        "metrics": report.get("metrics"),
        "memory": report.get("memory"),
        "fingerprint": report.get("fingerprint"),
    }
