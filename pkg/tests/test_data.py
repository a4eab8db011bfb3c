"""Vocabulary building, encoding, splitting, CSV ingestion, synthetic data."""

import math

import numpy as np
import pytest

from mec.data import (
    ColumnSchema,
    EncodedDataset,
    RawRecord,
    build_vocabulary,
    encode_record,
    generate_synthetic,
    load_csv_dataset,
    read_csv_records,
    temporal_split,
    transform_numeric,
)
from mec.errors import ConfigError, SchemaError


def _rec(label, cats, nums=()):
    return RawRecord(label=label, categorical=[list(c) for c in cats], numeric=list(nums))


FIELDS = ["ad", "site"]


def test_build_vocabulary_assigns_ids_in_first_seen_order():
    records = [
        _rec(1, [["a"], ["x"]]),
        _rec(0, [["b"], ["x"]]),
        _rec(0, [["a"], ["y"]]),
    ]
    vocab = build_vocabulary(records, FIELDS, min_count=1)
    assert vocab.encode_token(0, "a") == 0
    assert vocab.encode_token(0, "b") == 1
    assert vocab.encode_token(1, "x") == 0
    assert vocab.encode_token(1, "y") == 1
    # one OOV slot per field, counts in id order with OOV last
    assert vocab.sizes == [3, 3]
    assert list(vocab.counts[0]) == [2, 1, 0]
    assert list(vocab.counts[1]) == [2, 1, 0]
    assert vocab.total_features == 6


def test_build_vocabulary_min_count_folds_into_oov():
    records = [_rec(1, [["a"], ["x"]])] * 3 + [_rec(0, [["b"], ["y"]])]
    vocab = build_vocabulary(records, FIELDS, min_count=2)
    assert vocab.encode_token(0, "a") == 0
    assert vocab.encode_token(0, "b") == vocab.oov_id(0)
    assert vocab.sizes == [2, 2]
    # the dropped token's occurrences land on the OOV count
    assert list(vocab.counts[0]) == [3, 1]


def test_encode_record_handles_unknown_and_empty():
    vocab = build_vocabulary([_rec(1, [["a"], ["x"]])], FIELDS)
    enc = encode_record(_rec(0, [["zzz"], []], [1.0]), vocab)
    assert enc.cat_ids[0] == [vocab.oov_id(0)]
    assert enc.cat_ids[1] == [vocab.oov_id(1)]  # empty field falls back to OOV
    assert enc.label == 0.0


def test_transform_numeric():
    assert transform_numeric(None) == 0.0
    assert transform_numeric(-3.5) == -3.5
    assert transform_numeric(2.0) == 2.0
    assert transform_numeric(10.0) == pytest.approx(math.log(10.0))


def test_temporal_split_examples():
    assert temporal_split(list(range(10)), (0.7, 0.2, 0.1)) == (
        list(range(7)),
        [7, 8],
        [9],
    )
    assert temporal_split(list(range(3)), (0.7, 0.2, 0.1)) == ([0, 1], [2], [])
    assert temporal_split(list(range(7)), (0.7, 0.2, 0.1)) == ([0, 1, 2, 3, 4], [5], [6])


def test_temporal_split_rejects_tiny_input():
    with pytest.raises(ConfigError):
        temporal_split([1, 2], (0.7, 0.2, 0.1))


def test_temporal_split_preserves_order():
    train, val, test = temporal_split(list(range(100)), (0.5, 0.3, 0.2))
    assert train + val + test == list(range(100))
    assert len(train) == 50 and len(val) == 30 and len(test) == 20


SYN = dict(
    n_samples=400,
    n_fields=3,
    vocab_per_field=20,
    zipf_exponent=1.3,
    noise=0.1,
    hidden_dim=4,
    split_ratios=[0.7, 0.2, 0.1],
)


def test_synthetic_is_deterministic():
    s1, v1 = generate_synthetic(dict(SYN), 9)
    s2, v2 = generate_synthetic(dict(SYN), 9)
    assert v1 == v2
    for name in ("train", "val", "test"):
        a, b = s1.parts[name], s2.parts[name]
        assert np.array_equal(a.labels, b.labels)
        for x, y in zip(a.cat_ids, b.cat_ids):
            assert np.array_equal(x, y)
    s3, _ = generate_synthetic(dict(SYN), 10)
    assert not np.array_equal(s1.train.labels, s3.train.labels)


def test_synthetic_shapes_and_provenance():
    split, vocab = generate_synthetic(dict(SYN), 9)
    assert split.train.n_records == 280
    assert split.val.n_records == 80
    assert split.test.n_records == 40
    assert vocab.n_fields == 3
    assert vocab.sizes == [21, 21, 21]  # vocab_per_field + OOV slot
    assert split.provenance["source"] == "synthetic"
    assert split.provenance["seed"] == 9
    rate = float(np.mean(split.train.labels))
    assert 0.2 < rate < 0.8


def test_synthetic_zipf_concentrates_counts():
    split, vocab = generate_synthetic(dict(SYN, zipf_exponent=2.0), 9)
    counts = np.asarray(vocab.counts[0][:-1])
    # id order follows first occurrence, not popularity, so sort
    counts = np.sort(counts)[::-1]
    assert counts[0] > counts[1:].sum() * 0.3


def test_noise_flips_labels():
    clean, _ = generate_synthetic(dict(SYN, noise=0.0), 9)
    noisy, _ = generate_synthetic(dict(SYN, noise=0.3), 9)
    flips = np.mean(clean.train.labels != noisy.train.labels)
    assert 0.15 < flips < 0.45


def test_encoded_dataset_gather_and_record():
    records = [
        _rec(1, [["a", "b"], ["x"]], [1.0]),
        _rec(0, [["b"], ["y"]], [5.0]),
        _rec(1, [["a"], ["x"]], [None]),
    ]
    vocab = build_vocabulary(records, FIELDS)
    encoded = [encode_record(r, vocab) for r in records]
    ds = EncodedDataset.from_records(encoded, FIELDS, n_numeric=1)
    assert ds.n_records == 3
    # field 0 is ragged (a multi-token bag), field 1 single-token
    assert ds.cat_offsets[0] is not None
    assert ds.cat_offsets[1] is None
    sub = ds.gather(np.array([2, 0]))
    assert sub.n_records == 2
    assert sub.record(0).cat_ids == encoded[2].cat_ids
    assert sub.record(1).cat_ids == encoded[0].cat_ids
    assert sub.labels[0] == 1.0
    assert sub.numeric[0, 0] == 0.0  # missing numeric imputed


# ---------------- CSV ingestion ----------------


def _write_csv(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


SCHEMA = ColumnSchema(label="click", categoricals=["ad", "tags"], numerics=["price"])


def test_read_csv_records(tmp_path):
    path = _write_csv(
        tmp_path / "d.csv",
        "click,ad,tags,price\n"
        "1,a1,red|blue,3.5\n"
        "0,a2,,oops\n"
        "1,a1,green,\n",
    )
    records = read_csv_records(path, SCHEMA)
    assert [r.label for r in records] == [1, 0, 1]
    assert records[0].categorical == [["a1"], ["red", "blue"]]
    assert records[1].categorical[1] == []  # empty cell -> no tokens
    assert records[1].numeric == [None]  # junk numeric imputed as missing
    assert records[2].numeric == [None]


def test_read_csv_rejects_bad_label(tmp_path):
    path = _write_csv(tmp_path / "bad.csv", "click,ad,tags,price\n2,a1,red,1.0\n")
    with pytest.raises(SchemaError):
        read_csv_records(path, SCHEMA)


def test_read_csv_rejects_missing_column(tmp_path):
    path = _write_csv(tmp_path / "cols.csv", "click,ad,price\n1,a1,1.0\n")
    with pytest.raises(SchemaError):
        read_csv_records(path, SCHEMA)


def test_load_csv_dataset_builds_vocab_from_train_only(tmp_path):
    rows = ["click,ad,tags,price"]
    # 10 rows; the last token "late" appears only in the final row, which the
    # 0.7/0.2/0.1 split puts in the test part, so it must encode as OOV
    for i in range(9):
        rows.append(f"{i % 2},a{i % 3},t{i % 2},1.0")
    rows.append("1,late,late,2.0")
    path = _write_csv(tmp_path / "train.csv", "\n".join(rows) + "\n")
    split, vocab = load_csv_dataset(path, SCHEMA, [0.7, 0.2, 0.1], min_count=1)
    assert split.train.n_records == 7
    assert split.test.n_records == 1
    assert vocab.encode_token(0, "late") == vocab.oov_id(0)
    assert split.test.record(0).cat_ids[0] == [vocab.oov_id(0)]
    assert split.provenance["source"] == "csv"
