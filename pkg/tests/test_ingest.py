from dataclasses import replace

import numpy as np
import pytest

from ctaf.datamodel import joint_coverage
from ctaf.ingest import (
    DEFAULT_EEG_CHANNELS,
    DEFAULT_PHYS_CHANNELS,
    IngestError,
    Manifest,
    StreamRecord,
    bin_channels,
    bin_streams,
    filter_coverage,
    fit_norm_stats,
    load_manifest,
    normalize,
    read_streams,
    windows_from_streams,
)

from conftest import make_window

SPAN = (0.0, 5.0)


def _records(channel, times, values, subject="S01"):
    return [StreamRecord(subject, channel, float(t), float(v)) for t, v in zip(times, values)]


def test_one_sample_per_bin_is_identity():
    vals = np.arange(20, dtype=float)
    out = bin_streams(_records("eda", (np.arange(20) + 0.5) * 0.25, vals), SPAN, 20)
    np.testing.assert_array_equal(out["phys"].X[:, 1], vals)
    np.testing.assert_allclose(out["phys"].t, (np.arange(20) + 0.5) * 0.25)


def test_empty_bin_is_masked():
    times = [0.1, 0.6]
    out = bin_streams(_records("eda", times, [1.0, 2.0]), SPAN, 20)
    assert out["phys"].m[0] == 1 and out["phys"].m[1] == 0 and out["phys"].m[2] == 1


def test_two_samples_average():
    out = bin_streams(_records("bvp", [0.05, 0.1], [3.0, 5.0]), SPAN, 20)
    assert out["phys"].X[0, 0] == 4.0


def test_unknown_channel_rejected():
    with pytest.raises(IngestError, match="unknown channel"):
        bin_streams(_records("gsr", [0.1], [1.0]), SPAN, 20)


def test_full_manifest_dimensions():
    recs = []
    for ch in DEFAULT_EEG_CHANNELS + DEFAULT_PHYS_CHANNELS:
        recs += _records(ch, [0.1], [1.0])
    out = bin_streams(recs, SPAN, 20)
    assert out["eeg"].n_channels == 10 and out["phys"].n_channels == 4


def test_phys_only_records_mask_eeg():
    out = bin_streams(_records("temp", [0.1, 2.0], [33.0, 33.1]), SPAN, 20)
    assert out["eeg"].n_valid == 0 and out["eeg"].empty


def test_missing_channel_zero_filled_but_valid():
    out = bin_streams(_records("eda", [0.1], [2.0]), SPAN, 20)
    assert out["phys"].m[0] == 1.0
    np.testing.assert_array_equal(out["phys"].X[0], [0.0, 2.0, 0.0, 0.0])


def test_record_order_invariance():
    rng = np.random.default_rng(0)
    recs = []
    for ch in DEFAULT_EEG_CHANNELS + DEFAULT_PHYS_CHANNELS:
        t = rng.uniform(0, 5, size=30)
        recs += _records(ch, t, rng.normal(size=30))
    ref = bin_streams(recs, SPAN, 20)
    for _ in range(5):
        shuffled = [recs[i] for i in rng.permutation(len(recs))]
        out = bin_streams(shuffled, SPAN, 20)
        assert out["eeg"].equals(ref["eeg"]) and out["phys"].equals(ref["phys"])


def test_channel_order_follows_manifest():
    recs = _records("hr", [0.1], [70.0]) + _records("bvp", [0.1], [1.0]) + _records("temp", [0.1], [33.0])
    out = bin_streams(recs, SPAN, 20)
    np.testing.assert_array_equal(out["phys"].X[0], [1.0, 0.0, 33.0, 70.0])


def test_heart_rate_carried_forward_within_gap():
    b = bin_channels(_records("hr", [0.1, 4.9], [60.0, 80.0]), SPAN, 20)
    # bins starting up to 2 s after the sample inherit it
    assert b.present["hr"][:9].all() and not b.present["hr"][9:19].any()
    assert b.values["hr"][5] == 60.0


def test_manifest_file(tmp_path):
    p = tmp_path / "m.toml"
    p.write_text('window_length = 5.0\nn_bins = 10\n[channels]\nphys = ["a", "b", "c", "d"]\n')
    m = load_manifest(p)
    assert m.n_bins == 10 and m.phys_channels == ("a", "b", "c", "d")
    p.write_text('[channels]\nphys = ["a", "b"]\n')
    with pytest.raises(IngestError, match="expected 4"):
        load_manifest(p)


def test_read_streams_and_tile(tmp_path):
    p = tmp_path / "s.csv"
    rows = ["subject,channel,timestamp_s,value"]
    for t in np.arange(0, 10, 0.25):
        rows.append(f"S01,eda,{t + 0.1},{t}")
        rows.append(f"S01,delta,{t + 0.1},1")
    p.write_text("\n".join(rows) + "\n")
    windows = windows_from_streams(read_streams(p), Manifest())
    assert [w.window_span for w in windows] == [(0.0, 5.0), (5.0, 10.0)]
    assert joint_coverage(windows[0]) == 1.0


def test_constant_channel_normalizes_to_zero(rng):
    w = make_window(rng, p_drop=0.0)
    X = w.eeg.X.copy()
    X[:, 3] = 7.0
    w = replace(w, eeg=replace(w.eeg, X=X))
    stats = fit_norm_stats([w])
    assert stats.eeg["S01"].constant[3]
    out = normalize([w], stats)[0]
    np.testing.assert_array_equal(out.eeg.X[:, 3], 0.0)


def test_normalized_moments():
    rng = np.random.default_rng(5)
    windows = [make_window(rng, 20, 20, p_drop=0.2) for _ in range(50)]
    out = normalize(windows, fit_norm_stats(windows))
    X = np.concatenate([w.eeg.X[w.eeg.m == 1] for w in out])
    np.testing.assert_allclose(X.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(X.std(axis=0), 1.0, atol=1e-12)


def test_masked_tokens_untouched_and_not_idempotent(rng):
    w = make_window(rng, 10, 10, p_drop=0.5)
    stats = fit_norm_stats([w])
    once = normalize([w], stats)[0]
    m0 = w.eeg.m == 0
    np.testing.assert_array_equal(once.eeg.X[m0], w.eeg.X[m0])
    twice = normalize([once], stats)[0]
    assert not np.allclose(twice.eeg.X, once.eeg.X)


def test_missing_subject_stats(rng):
    stats = fit_norm_stats([make_window(rng, subject="S01")])
    with pytest.raises(IngestError, match="S02"):
        normalize([make_window(rng, subject="S02")], stats)


def test_subject_stats_ignore_other_subjects(rng):
    train = [make_window(rng, subject="S01") for _ in range(3)]
    held = [make_window(rng, subject="S02") for _ in range(3)]
    held_mut = [make_window(rng, subject="S02") for _ in range(3)]
    a = fit_norm_stats(train + held).eeg["S01"]
    b = fit_norm_stats(train + held_mut).eeg["S01"]
    assert a.mean.tobytes() == b.mean.tobytes() and a.std.tobytes() == b.std.tobytes()


def test_filter_coverage_thresholds():
    rng = np.random.default_rng(3)
    windows = [make_window(rng, 20, 20, p_drop=p) for p in np.linspace(0, 0.8, 30)]
    assert filter_coverage(windows, 0.0) == windows
    kept = filter_coverage(windows, 0.6)
    assert len(kept) == sum(1 for w in windows if joint_coverage(w) >= 0.6)
    gap = make_window(rng, 20, 20, p_drop=0.0)
    m = gap.eeg.m.copy()
    m[4] = 0
    gap = replace(gap, eeg=replace(gap.eeg, m=m))
    assert filter_coverage([gap], 1.0) == []
