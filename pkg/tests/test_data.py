import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from packmil.config import ConfigError, SynthConfig
from packmil.data import (
    HEADER_SIZE,
    FeatureBag,
    FeatureCorruptionError,
    FeatureFormatError,
    LabelRecord,
    Manifest,
    ManifestError,
    ManifestRow,
    PersistenceError,
    decode_features,
    encode_features,
    generate_synthetic_dataset,
    load_bags,
    load_manifest,
    read_feature_file,
    sample_lengths,
    synthesize_bags,
    write_feature_file,
    write_manifest,
)

HEADER = "slide_id,feature_path,n_patches,task,grade,subtypes,time_bin,event,split\n"


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 5)),
              elements=st.floats(allow_nan=False, allow_infinity=True, width=64)))
def test_round_trip_is_bit_exact(x):
    y = decode_features(encode_features(x))
    assert y.shape == x.shape
    assert y.tobytes() == np.ascontiguousarray(x).tobytes()


def test_round_trip_through_file(tmp_path):
    x = np.random.default_rng(0).normal(size=(7, 3))
    bag = FeatureBag("s", x, LabelRecord("grading", grade=1))
    write_feature_file(bag, tmp_path / "a.pmf")
    np.testing.assert_array_equal(read_feature_file(tmp_path / "a.pmf"), x)


def test_single_value_file_size():
    buf = encode_features(np.zeros((1, 1)))
    assert HEADER_SIZE == 16
    assert buf[:4] == b"PMF1"
    assert len(buf) - HEADER_SIZE == 8
    assert buf[HEADER_SIZE:] == b"\x00" * 8


def test_header_is_little_endian():
    buf = encode_features(np.ones((2, 3)))
    assert buf[4:16] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little") + (3).to_bytes(4, "little")


def test_wrong_magic_and_version():
    buf = bytearray(encode_features(np.ones((2, 2))))
    bad = bytes(b"XXXX" + buf[4:])
    with pytest.raises(FeatureFormatError, match="magic"):
        decode_features(bad)
    buf[4] = 2
    with pytest.raises(FeatureFormatError, match="version"):
        decode_features(bytes(buf))


def test_truncated_payload_is_corruption():
    buf = encode_features(np.ones((3, 2)))
    with pytest.raises(FeatureCorruptionError):
        decode_features(buf[:-1])
    with pytest.raises(FeatureCorruptionError):
        decode_features(buf[:10])


def test_missing_file_is_persistence_error(tmp_path):
    with pytest.raises(PersistenceError, match="nope.pmf"):
        read_feature_file(tmp_path / "nope.pmf")


def _write_rows(tmp_path, rows, files=True):
    if files:
        for r in rows:
            sid, n = r.split(",")[0], int(r.split(",")[2])
            write_feature_file(np.ones((n, 4)), tmp_path / f"{sid}.pmf")
    path = tmp_path / "m.csv"
    path.write_text(HEADER + "".join(r + "\n" for r in rows))
    return path


def test_three_row_manifest(tmp_path):
    path = _write_rows(tmp_path, [
        "a,a.pmf,3,grading,2,,,,train",
        "b,b.pmf,2,grading,0,,,,val",
        "c,c.pmf,5,grading,5,,,,test",
    ])
    m = load_manifest(path, max_grade=5)
    assert len(m) == 3
    assert [r.label.grade for r in m.rows] == [2, 0, 5]
    bags = load_bags(m)
    assert [b.n_patches for b in bags] == [3, 2, 5]


def test_subtype_and_survival_rows(tmp_path):
    path = _write_rows(tmp_path, ["a,a.pmf,3,subtyping,,1|0|1,,,train", "b,b.pmf,2,survival,,,3,0,train"])
    m = load_manifest(path, n_subtypes=3, time_bins=4)
    assert m.rows[0].label.subtypes == (1, 0, 1)
    assert (m.rows[1].label.time_bin, m.rows[1].label.event) == (3, 0)


def test_duplicate_slide_id_reported_at_second_occurrence(tmp_path):
    path = _write_rows(tmp_path, ["a,a.pmf,3,grading,1,,,,train", "b,b.pmf,3,grading,1,,,,train",
                                  "a,a.pmf,3,grading,1,,,,train"])
    with pytest.raises(ManifestError, match=r"m\.csv:4: duplicate slide_id 'a'"):
        load_manifest(path)


@pytest.mark.parametrize("row,pattern", [
    ("a,a.pmf,3,grading,6,,,,train", "grade 6 outside"),
    ("a,a.pmf,3,grading,-1,,,,train", "grade -1 outside"),
    ("a,a.pmf,3,detection,1,,,,train", "unknown task"),
    ("a,a.pmf,3,survival,,,5,1,train", "time_bin 5 outside"),
    ("a,a.pmf,3,survival,,,2,,train", "both time_bin and event"),
    ("a,a.pmf,3,grading,1,1|0,,,train", "must not carry"),
    ("a,a.pmf,3,grading,1,,,,holdout", "split must be"),
])
def test_manifest_row_errors(tmp_path, row, pattern):
    path = _write_rows(tmp_path, [row])
    with pytest.raises(ManifestError, match=pattern):
        load_manifest(path, max_grade=5, time_bins=4)


def test_missing_feature_file_named(tmp_path):
    path = _write_rows(tmp_path, ["a,a.pmf,3,grading,1,,,,train"], files=False)
    with pytest.raises(ManifestError, match=r"m\.csv:2: feature file .*a\.pmf does not exist"):
        load_manifest(path)


def test_dim_mismatch_at_load(tmp_path):
    path = _write_rows(tmp_path, ["a,a.pmf,3,grading,1,,,,train"])
    with pytest.raises(ManifestError, match="dim"):
        load_bags(load_manifest(path), dim=5)


def test_row_count_mismatch_at_load(tmp_path):
    path = _write_rows(tmp_path, ["a,a.pmf,3,grading,1,,,,train"])
    write_feature_file(np.ones((4, 4)), tmp_path / "a.pmf")
    with pytest.raises(ManifestError, match="n_patches"):
        load_bags(load_manifest(path))


def test_manifest_write_load_round_trip(tmp_path):
    rows = [ManifestRow("x", "x.pmf", 2, LabelRecord("subtyping", subtypes=(0, 1)), "test")]
    write_feature_file(np.ones((2, 3)), tmp_path / "x.pmf")
    write_manifest(Manifest(rows, tmp_path), tmp_path / "m.csv")
    assert load_manifest(tmp_path / "m.csv").rows == rows


def test_label_record_exclusive_fields():
    with pytest.raises(ManifestError):
        LabelRecord("grading")
    with pytest.raises(ManifestError):
        LabelRecord("subtyping", subtypes=(1, 0), grade=2)


def test_feature_bag_checks_patch_count():
    with pytest.raises(ValueError):
        FeatureBag("s", np.ones((3, 2)), LabelRecord("grading", grade=0), n_patches=4)
    with pytest.raises(ValueError):
        FeatureBag("s", np.ones((0, 2)), LabelRecord("grading", grade=0))


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_generation_is_deterministic(tmp_path):
    cfg = SynthConfig(n_bags=25, dim=4, task="survival")
    generate_synthetic_dataset(cfg, 7, tmp_path / "a")
    generate_synthetic_dataset(cfg, 7, tmp_path / "b")
    generate_synthetic_dataset(cfg, 8, tmp_path / "c")
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")
    assert _tree_digest(tmp_path / "a") != _tree_digest(tmp_path / "c")
    m = load_manifest(tmp_path / "a" / "manifest.csv", time_bins=4)
    assert len(load_bags(m, dim=4)) == 25


def test_lengths_span_orders_of_magnitude():
    lengths = sample_lengths(SynthConfig(n_bags=1000), np.random.default_rng(0))
    assert math.log10(lengths.max() / lengths.min()) >= 1.5
    assert lengths.min() >= 16 and lengths.max() <= 4096


@pytest.mark.parametrize("rate", [0.1, 0.3, 0.6])
def test_censoring_rate(rate):
    cfg = SynthConfig(n_bags=600, dim=2, task="survival", censor_rate=rate, len_max=64)
    bags, _ = synthesize_bags(cfg, 3)
    censored = np.mean([b.label.event == 0 for b in bags])
    assert abs(censored - rate) <= 0.05
    bins = [b.label.time_bin for b in bags]
    assert set(bins) == {1, 2, 3, 4}


def _mean_classifier_accuracy(cfg, seed):
    bags, splits = synthesize_bags(cfg, seed)
    x = np.stack([b.features.mean(axis=0) for b in bags])
    y = np.array([b.label.grade for b in bags])
    train = np.array([s == "train" for s in splits])
    test = np.array([s == "test" for s in splits])
    centroids = np.stack([x[train & (y == c)].mean(axis=0) for c in range(cfg.n_classes)])
    pred = np.argmin(((x[test][:, None, :] - centroids[None]) ** 2).sum(-1), axis=1)
    return float(np.mean(pred == y[test])), int(test.sum())


def test_no_signal_means_chance_accuracy():
    cfg = SynthConfig(n_bags=1500, dim=8, signal_fraction=0.0, len_max=200)
    acc, n = _mean_classifier_accuracy(cfg, 0)
    assert abs(acc - 1 / 3) <= 3 * math.sqrt((1 / 3) * (2 / 3) / n)
    cfg.signal_fraction = 0.1
    assert _mean_classifier_accuracy(cfg, 0)[0] > 0.9


def test_invalid_distribution_parameters():
    with pytest.raises(ConfigError):
        synthesize_bags(SynthConfig(len_sigma=-1.0), 0)
    with pytest.raises(ConfigError):
        synthesize_bags(SynthConfig(len_min=100, len_max=10), 0)
