"""Data ingest: CSV parsing, vocabulary building, encoding, splits, synthetic data.

Categorical cells may hold several tokens (multi-value fields); encoding maps
tokens to per-field integer ids with a reserved out-of-vocabulary id in the
last slot. Numeric cells get the log transform used by common CTR
preprocessing (identity up to 2, natural log above). Splits are temporal:
record order is assumed to be time order and is never shuffled here.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from mec.errors import ConfigError, SchemaError
from mec.seeding import rng_for


@dataclass
class RawRecord:
    """One parsed input row: label, raw token lists per categorical field,
    numeric values (None = missing)."""

    label: int
    categorical: list  # list[list[str]], one token list per field
    numeric: list  # list[float | None]


@dataclass
class InteractionRecord:
    """One encoded row: integer ids per categorical field, transformed numerics."""

    label: float
    cat_ids: list  # list[list[int]]
    numeric: list  # list[float]


class FeatureVocabulary:
    """Per-field token -> id maps with train-split frequency counts.

    Ids are assigned in first-occurrence order; each field reserves its last
    id for out-of-vocabulary tokens. `counts[f][i]` is the number of training
    occurrences of id i; the OOV slot accumulates the counts of all tokens
    dropped by min_count.
    """

    def __init__(self, field_names, token_ids, counts):
        self.field_names = list(field_names)
        self.token_ids = token_ids  # list[dict[str, int]]
        self.counts = [np.asarray(c, dtype=np.int64) for c in counts]
        for f, (tok, cnt) in enumerate(zip(self.token_ids, self.counts)):
            if len(cnt) != len(tok) + 1:
                raise ValueError(f"field {f}: counts must cover tokens plus OOV")

    @property
    def n_fields(self):
        return len(self.field_names)

    def size(self, f):
        """Number of ids in field f, OOV slot included."""
        return len(self.counts[f])

    @property
    def sizes(self):
        return [self.size(f) for f in range(self.n_fields)]

    @property
    def field_offsets(self):
        """Start of each field's id range in the global feature indexing."""
        return np.concatenate(([0], np.cumsum(self.sizes))).astype(np.int64)

    @property
    def total_features(self):
        return int(sum(self.sizes))

    def oov_id(self, f):
        return self.size(f) - 1

    def encode_token(self, f, token):
        return self.token_ids[f].get(token, self.oov_id(f))

    def all_counts(self):
        """Concatenated per-field counts in global feature order."""
        return np.concatenate(self.counts)

    def __eq__(self, other):
        if not isinstance(other, FeatureVocabulary):
            return NotImplemented
        return (
            self.field_names == other.field_names
            and self.token_ids == other.token_ids
            and all(np.array_equal(a, b) for a, b in zip(self.counts, other.counts))
        )


def build_vocabulary(records, field_names, min_count=1):
    """Count tokens per categorical field and assign ids.

    Tokens with fewer than min_count occurrences fold into the OOV slot.
    Counting is single-pass in record order, so ids are reproducible for a
    given record stream.
    """
    if min_count < 1:
        raise ConfigError(f"min_count must be >= 1, got {min_count}")
    n_fields = len(field_names)
    counters = [dict() for _ in range(n_fields)]
    for i, rec in enumerate(records):
        if len(rec.categorical) != n_fields:
            raise SchemaError(
                f"record {i}: expected {n_fields} categorical fields, got {len(rec.categorical)}"
            )
        for f in range(n_fields):
            for tok in rec.categorical[f]:
                counters[f][tok] = counters[f].get(tok, 0) + 1
    token_ids, counts = [], []
    for f in range(n_fields):
        ids, kept_counts, oov_count = {}, [], 0
        for tok, c in counters[f].items():
            if c >= min_count:
                ids[tok] = len(ids)
                kept_counts.append(c)
            else:
                oov_count += c
        kept_counts.append(oov_count)
        token_ids.append(ids)
        counts.append(np.asarray(kept_counts, dtype=np.int64))
    return FeatureVocabulary(field_names, token_ids, counts)


def transform_numeric(x):
    """Missing -> 0.0; identity up to 2; natural log above."""
    if x is None:
        return 0.0
    x = float(x)
    if x <= 2.0:
        return x
    return math.log(x)


def encode_record(rec, vocab):
    """Map one RawRecord to ids and transformed numerics. Unknown tokens get
    the field's OOV id; an empty token list encodes as a single OOV hit."""
    cat_ids = []
    for f in range(vocab.n_fields):
        toks = rec.categorical[f]
        if toks:
            cat_ids.append([vocab.encode_token(f, t) for t in toks])
        else:
            cat_ids.append([vocab.oov_id(f)])
    numeric = [transform_numeric(x) for x in rec.numeric]
    return InteractionRecord(label=float(rec.label), cat_ids=cat_ids, numeric=numeric)


def temporal_split(records, ratios):
    """Split an ordered sequence into contiguous train/val/test chunks.

    Sizes: round-half-up of n*ratio for the first two splits, remainder in
    the third, clipped so the pieces always partition the input.
    """
    r = tuple(float(x) for x in ratios)
    if len(r) != 3 or any(x < 0 for x in r) or abs(sum(r) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be 3 non-negative values summing to 1, got {ratios}")
    n = len(records)
    if n < 3:
        raise ConfigError(f"need at least 3 records to split, got {n}")
    n0 = min(n, int(math.floor(n * r[0] + 0.5)))
    n1 = min(n - n0, int(math.floor(n * r[1] + 0.5)))
    return records[:n0], records[n0 : n0 + n1], records[n0 + n1 :]


class EncodedDataset:
    """Columnar store for encoded records.

    Each categorical field is a flat int64 id array plus an offsets array
    (offsets[i]:offsets[i+1] is record i's bag); offsets None marks the
    common single-token-per-record case and skips the indirection.
    """

    def __init__(self, field_names, cat_ids, cat_offsets, numeric, labels):
        self.field_names = list(field_names)
        self.cat_ids = [np.asarray(a, dtype=np.int64) for a in cat_ids]
        self.cat_offsets = [None if o is None else np.asarray(o, dtype=np.int64) for o in cat_offsets]
        self.numeric = np.asarray(numeric, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.float64)

    @classmethod
    def from_records(cls, records, field_names, n_numeric):
        n = len(records)
        labels = np.fromiter((r.label for r in records), dtype=np.float64, count=n)
        numeric = np.zeros((n, n_numeric), dtype=np.float64)
        for i, r in enumerate(records):
            if len(r.numeric) != n_numeric:
                raise SchemaError(f"record {i}: expected {n_numeric} numeric values, got {len(r.numeric)}")
            numeric[i] = r.numeric
        cat_ids, cat_offsets = [], []
        for f in range(len(field_names)):
            lens = np.fromiter((len(r.cat_ids[f]) for r in records), dtype=np.int64, count=n)
            flat = np.fromiter(
                (i for r in records for i in r.cat_ids[f]), dtype=np.int64, count=int(lens.sum())
            )
            if n and lens.max(initial=1) == 1 and lens.min(initial=1) == 1:
                cat_ids.append(flat)
                cat_offsets.append(None)
            else:
                cat_ids.append(flat)
                cat_offsets.append(np.concatenate(([0], np.cumsum(lens))))
        return cls(field_names, cat_ids, cat_offsets, numeric, labels)

    @property
    def n_records(self):
        return int(self.labels.shape[0])

    @property
    def n_fields(self):
        return len(self.field_names)

    def record(self, i):
        """Materialize record i (mainly for tests and inspection)."""
        cat = []
        for f in range(self.n_fields):
            off = self.cat_offsets[f]
            if off is None:
                cat.append([int(self.cat_ids[f][i])])
            else:
                cat.append([int(x) for x in self.cat_ids[f][off[i] : off[i + 1]]])
        return InteractionRecord(float(self.labels[i]), cat, [float(x) for x in self.numeric[i]])

    def gather(self, idx):
        """Row subset in the order given by idx (used for shuffled batches)."""
        idx = np.asarray(idx, dtype=np.int64)
        cat_ids, cat_offsets = [], []
        for f in range(self.n_fields):
            off = self.cat_offsets[f]
            if off is None:
                cat_ids.append(self.cat_ids[f][idx])
                cat_offsets.append(None)
            else:
                lens = np.diff(off)[idx]
                starts = off[:-1][idx]
                new_off = np.concatenate(([0], np.cumsum(lens)))
                total = int(new_off[-1])
                pos = np.repeat(starts - new_off[:-1], lens) + np.arange(total)
                cat_ids.append(self.cat_ids[f][pos])
                cat_offsets.append(new_off)
        return EncodedDataset(self.field_names, cat_ids, cat_offsets, self.numeric[idx], self.labels[idx])


@dataclass
class DatasetSplit:
    """Train/val/test EncodedDatasets plus how they were produced."""

    train: EncodedDataset
    val: EncodedDataset
    test: EncodedDataset
    ratios: tuple
    provenance: dict = field(default_factory=dict)

    @property
    def parts(self):
        return {"train": self.train, "val": self.val, "test": self.test}


@dataclass
class ColumnSchema:
    """Which CSV columns hold what. Columns are header names when has_header,
    else integer indices."""

    label: object
    categoricals: list
    numerics: list
    delimiter: str = ","
    multivalue_delimiter: str = "|"
    has_header: bool = True


def read_csv_records(path, schema):
    """Parse a delimited file into RawRecords, validating per row."""
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        rows = iter(reader)
        if schema.has_header:
            try:
                header = next(rows)
            except StopIteration:
                raise SchemaError("empty file: no header row")
            col = {name: i for i, name in enumerate(header)}
            try:
                label_i = col[schema.label]
                cat_i = [col[c] for c in schema.categoricals]
                num_i = [col[c] for c in schema.numerics]
            except KeyError as exc:
                raise SchemaError(f"column {exc.args[0]!r} not in header") from None
        else:
            label_i = int(schema.label)
            cat_i = [int(c) for c in schema.categoricals]
            num_i = [int(c) for c in schema.numerics]
        width = max([label_i] + cat_i + num_i) + 1
        for i, row in enumerate(rows):
            if len(row) < width:
                raise SchemaError(f"record {i}: expected at least {width} columns, got {len(row)}")
            raw_label = row[label_i].strip()
            if raw_label not in ("0", "1"):
                raise SchemaError(f"record {i}: label must be 0 or 1, got {raw_label!r}")
            cats = []
            for c in cat_i:
                cell = row[c]
                toks = cell.split(schema.multivalue_delimiter) if cell != "" else []
                cats.append(toks)
            nums = []
            for c in num_i:
                cell = row[c].strip()
                try:
                    # unparsable cells count as missing, same as empty ones
                    nums.append(float(cell) if cell != "" else None)
                except ValueError:
                    nums.append(None)
            records.append(RawRecord(label=int(raw_label), categorical=cats, numeric=nums))
    return records


def load_csv_dataset(path, schema, ratios, min_count=1):
    """Full CSV pipeline: parse, temporal split, vocab from train only, encode.

    Returns (DatasetSplit, FeatureVocabulary).
    """
    raw = read_csv_records(path, schema)
    tr, va, te = temporal_split(raw, ratios)
    vocab = build_vocabulary(tr, schema.categoricals, min_count=min_count)
    n_num = len(schema.numerics)
    parts = [
        EncodedDataset.from_records([encode_record(r, vocab) for r in chunk], schema.categoricals, n_num)
        for chunk in (tr, va, te)
    ]
    split = DatasetSplit(
        train=parts[0],
        val=parts[1],
        test=parts[2],
        ratios=tuple(float(x) for x in ratios),
        provenance={"source": "csv", "path": str(path), "min_count": int(min_count)},
    )
    return split, vocab


def _synthetic_core(params, seed):
    """Draw ids from per-field Zipf marginals and label them with a hidden
    factorization-machine scorer. Returns (ids, logits, clean_labels)."""
    n = int(params["n_samples"])
    n_fields = int(params["n_fields"])
    vocab = int(params["vocab_per_field"])
    s = float(params.get("zipf_exponent", 1.1))
    hidden = int(params.get("hidden_dim", 8))
    if n < 1 or n_fields < 1 or vocab < 1:
        raise ConfigError("synthetic params must be positive")

    p = np.arange(1, vocab + 1, dtype=np.float64) ** (-s)
    p /= p.sum()
    rng_ids = rng_for(seed, "synthetic", "ids")
    ids = rng_ids.choice(vocab, size=(n, n_fields), p=p)

    rng_model = rng_for(seed, "synthetic", "model")
    emb = rng_model.normal(0.0, 1.0 / math.sqrt(hidden), size=(n_fields, vocab, hidden))
    lin = rng_model.normal(0.0, 1.0, size=(n_fields, vocab))

    vecs = emb[np.arange(n_fields)[None, :], ids]  # (n, F, hidden)
    total = vecs.sum(axis=1)
    pair = 0.5 * ((total * total).sum(axis=1) - (vecs * vecs).sum(axis=(1, 2)))
    logits = pair + lin[np.arange(n_fields)[None, :], ids].sum(axis=1)
    logits = logits - np.median(logits)
    labels = (logits > 0).astype(np.float64)
    return ids.astype(np.int64), logits, labels


def generate_synthetic(params, seed):
    """Synthetic CTR dataset: Zipf-distributed categorical draws, labels from
    a hidden FM with optional label noise, temporal split, vocabulary with
    counts taken from the train chunk only.

    Returns (DatasetSplit, FeatureVocabulary).
    """
    ids, _, labels = _synthetic_core(params, seed)
    noise = float(params.get("noise", 0.0))
    if noise > 0:
        rng_noise = rng_for(seed, "synthetic", "noise")
        flip = rng_noise.random(labels.shape[0]) < noise
        labels = np.where(flip, 1.0 - labels, labels)

    n, n_fields = ids.shape
    vocab_size = int(params["vocab_per_field"])
    ratios = tuple(float(x) for x in params.get("split_ratios", (0.7, 0.2, 0.1)))
    idx = np.arange(n)
    tr_i, va_i, te_i = temporal_split(idx, ratios)

    field_names = [f"f{f}" for f in range(n_fields)]
    parts = []
    for part_idx in (tr_i, va_i, te_i):
        parts.append(
            EncodedDataset(
                field_names,
                [ids[part_idx, f] for f in range(n_fields)],
                [None] * n_fields,
                np.zeros((len(part_idx), 0)),
                labels[part_idx],
            )
        )

    # full generator vocabulary; ids unseen in train keep count 0, and each
    # field still reserves a trailing OOV slot like every other vocabulary
    token_ids = [{str(i): i for i in range(vocab_size)} for _ in range(n_fields)]
    counts = []
    for f in range(n_fields):
        c = np.bincount(ids[tr_i, f], minlength=vocab_size).astype(np.int64)
        counts.append(np.concatenate((c, [0])))
    vocab = FeatureVocabulary(field_names, token_ids, counts)

    split = DatasetSplit(
        train=parts[0],
        val=parts[1],
        test=parts[2],
        ratios=ratios,
        provenance={"source": "synthetic", "seed": int(seed), "params": dict(params)},
    )
    return split, vocab
