"""Long-format sensor streams -> binned, normalised, coverage-filtered windows.

Input is a delimited table with columns ``subject, channel, timestamp_s,
value`` plus a manifest declaring which channel belongs to which modality (and
in which order), the window length and the bin count. Each window is split into
equal-width bins; a bin's channel feature is the mean of the samples that fall
in it.
"""

from __future__ import annotations

import csv
import logging
import sys
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .datamodel import ClipWindow, ModalSequence, joint_coverage

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger(__name__)

# NeuroSky eSense export: 8 band powers plus the attention/meditation meters.
DEFAULT_EEG_CHANNELS = (
    "delta", "theta", "low_alpha", "high_alpha",
    "low_beta", "high_beta", "low_gamma", "mid_gamma",
    "attention", "meditation",
)
DEFAULT_PHYS_CHANNELS = ("bvp", "eda", "temp", "hr")


class IngestError(ValueError):
    pass


@dataclass(frozen=True)
class StreamRecord:
    subject: str
    channel: str
    timestamp: float
    value: float


@dataclass(frozen=True)
class Manifest:
    eeg_channels: tuple[str, ...] = DEFAULT_EEG_CHANNELS
    phys_channels: tuple[str, ...] = DEFAULT_PHYS_CHANNELS
    window_length: float = 5.0
    n_bins: int = 20
    origin: float = 0.0
    locf_channels: tuple[str, ...] = ("hr",)
    locf_max_gap: float = 2.0

    @property
    def modality_of(self) -> dict[str, str]:
        out = {c: "eeg" for c in self.eeg_channels}
        out.update({c: "phys" for c in self.phys_channels})
        return out

    def validate(self, expected_eeg: int | None = 10, expected_phys: int | None = 4) -> None:
        if expected_eeg is not None and len(self.eeg_channels) != expected_eeg:
            raise IngestError(f"manifest declares {len(self.eeg_channels)} EEG channels, expected {expected_eeg}")
        if expected_phys is not None and len(self.phys_channels) != expected_phys:
            raise IngestError(f"manifest declares {len(self.phys_channels)} physiology channels, expected {expected_phys}")
        dup = set(self.eeg_channels) & set(self.phys_channels)
        if dup:
            raise IngestError(f"channels assigned to both modalities: {sorted(dup)}")


_MANIFEST_KEYS = {"window_length", "n_bins", "origin", "channels", "locf"}


def load_manifest(path) -> Manifest:
    """Read a TOML manifest::

        window_length = 5.0
        n_bins = 20
        [channels]
        eeg = ["delta", ...]     # 10 names, in feature order
        phys = ["bvp", "eda", "temp", "hr"]
        [locf]
        channels = ["hr"]
        max_gap_s = 2.0
    """
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    unknown = set(raw) - _MANIFEST_KEYS
    if unknown:
        raise IngestError(f"unknown manifest keys: {sorted(unknown)}")
    ch = raw.get("channels", {})
    locf = raw.get("locf", {})
    m = Manifest(
        eeg_channels=tuple(ch.get("eeg", DEFAULT_EEG_CHANNELS)),
        phys_channels=tuple(ch.get("phys", DEFAULT_PHYS_CHANNELS)),
        window_length=float(raw.get("window_length", 5.0)),
        n_bins=int(raw.get("n_bins", 20)),
        origin=float(raw.get("origin", 0.0)),
        locf_channels=tuple(locf.get("channels", ("hr",))),
        locf_max_gap=float(locf.get("max_gap_s", 2.0)),
    )
    m.validate()
    return m


def read_streams(path) -> list[StreamRecord]:
    out = []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"subject", "channel", "timestamp_s", "value"} - set(reader.fieldnames or ())
        if missing:
            raise IngestError(f"stream table missing columns {sorted(missing)}")
        for row in reader:
            ts = float(row["timestamp_s"])
            if not np.isfinite(ts):
                raise IngestError(f"non-finite timestamp in row {row}")
            out.append(StreamRecord(row["subject"], row["channel"], ts, float(row["value"])))
    return out


def read_labels(path) -> dict[tuple[str, float], tuple[float, float]]:
    """Label table with columns ``subject, start_s, arousal, valence``."""
    out = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            out[(row["subject"], round(float(row["start_s"]), 6))] = (float(row["arousal"]), float(row["valence"]))
    return out


# --------------------------------------------------------------------------
# binning


@dataclass
class BinnedChannels:
    """Per-channel bin means over one window; ``present`` marks bins with data."""

    centers: np.ndarray
    values: dict[str, np.ndarray] = field(default_factory=dict)
    present: dict[str, np.ndarray] = field(default_factory=dict)


def _group(records: Iterable[StreamRecord]) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    by_channel: dict[str, list[tuple[float, float]]] = defaultdict(list)
    for r in records:
        by_channel[r.channel].append((r.timestamp, r.value))
    out = {}
    for ch, pairs in by_channel.items():
        arr = np.array(sorted(pairs), dtype=np.float64)
        out[ch] = (arr[:, 0], arr[:, 1])
    return out


def bin_channels(
    records: Iterable[StreamRecord] | Mapping[str, tuple[np.ndarray, np.ndarray]],
    window_span: tuple[float, float],
    n_bins: int,
    manifest: Manifest = Manifest(),
) -> BinnedChannels:
    """Mean of the samples in each equal-width bin, per channel.

    Samples are sorted by (time, value) before aggregation, so the result does
    not depend on record order. Channels listed in ``manifest.locf_channels``
    are first carried forward: a bin with no sample takes the last earlier
    observation, provided it is at most ``locf_max_gap`` seconds old.
    """
    grouped = records if isinstance(records, Mapping) else _group(records)
    known = manifest.modality_of
    unknown = set(grouped) - set(known)
    if unknown:
        raise IngestError(f"unknown channel(s) {sorted(unknown)}")
    start, end = window_span
    width = (end - start) / n_bins
    centers = start + (np.arange(n_bins) + 0.5) * width
    out = BinnedChannels(centers=centers)
    for ch, (ts, vs) in grouped.items():
        inside = (ts >= start) & (ts < end)
        idx = np.clip(((ts[inside] - start) / width).astype(np.int64), 0, n_bins - 1)
        sums = np.bincount(idx, weights=vs[inside], minlength=n_bins)
        counts = np.bincount(idx, minlength=n_bins).astype(np.float64)
        present = counts > 0
        values = np.where(present, sums / np.maximum(counts, 1.0), 0.0)
        if ch in manifest.locf_channels:
            bin_starts = start + np.arange(n_bins) * width
            for b in np.flatnonzero(~present):
                j = np.searchsorted(ts, bin_starts[b], side="left") - 1
                if j >= 0 and bin_starts[b] - ts[j] <= manifest.locf_max_gap:
                    values[b] = vs[j]
                    present[b] = True
        out.values[ch] = values
        out.present[ch] = present
    return out


def assemble_features(binned: BinnedChannels, manifest: Manifest = Manifest()) -> tuple[ModalSequence, ModalSequence]:
    """Stack channels in manifest order into (EEG, physiology) sequences.

    A missing channel is zero-filled; a token is valid when at least one of
    its modality's channels has data in that bin.
    """
    unknown = set(binned.values) - set(manifest.modality_of)
    if unknown:
        raise IngestError(f"channels not in manifest: {sorted(unknown)}")
    S = binned.centers.shape[0]

    def stack(channels: Sequence[str]) -> ModalSequence:
        X = np.zeros((S, len(channels)))
        has = np.zeros((S, len(channels)), dtype=bool)
        for j, ch in enumerate(channels):
            if ch in binned.values:
                X[:, j] = binned.values[ch]
                has[:, j] = binned.present[ch]
        m = has.any(axis=1).astype(np.float64)
        return ModalSequence(X * m[:, None], binned.centers, m, empty=not m.any())

    return stack(manifest.eeg_channels), stack(manifest.phys_channels)


def bin_streams(
    records: Iterable[StreamRecord],
    window_span: tuple[float, float],
    n_bins: int,
    manifest: Manifest = Manifest(),
) -> dict[str, ModalSequence]:
    eeg, phys = assemble_features(bin_channels(records, window_span, n_bins, manifest), manifest)
    return {"eeg": eeg, "phys": phys}


def windows_from_streams(
    records: Sequence[StreamRecord],
    manifest: Manifest = Manifest(),
    labels: Mapping[tuple[str, float], tuple[float, float]] | None = None,
) -> list[ClipWindow]:
    """Tile every subject's recording into consecutive windows."""
    by_subject: dict[str, list[StreamRecord]] = defaultdict(list)
    for r in records:
        by_subject[r.subject].append(r)
    W = manifest.window_length
    windows = []
    for subject in sorted(by_subject):
        grouped = _group(by_subject[subject])
        unknown = set(grouped) - set(manifest.modality_of)
        if unknown:
            raise IngestError(f"unknown channel(s) {sorted(unknown)} for subject {subject}")
        t_all = np.concatenate([ts for ts, _ in grouped.values()])
        first = int(np.floor((t_all.min() - manifest.origin) / W))
        last = int(np.floor((t_all.max() - manifest.origin) / W))
        for i in range(first, last + 1):
            span = (manifest.origin + i * W, manifest.origin + (i + 1) * W)
            eeg, phys = assemble_features(bin_channels(grouped, span, manifest.n_bins, manifest), manifest)
            if not eeg.n_valid and not phys.n_valid:
                continue
            label = None if labels is None else labels.get((subject, round(span[0], 6)))
            windows.append(ClipWindow(eeg=eeg, phys=phys, subject=subject, label=label,
                                      window_span=span, clip_id=f"{subject}-{i:05d}"))
    return windows


# --------------------------------------------------------------------------
# subject-wise normalisation


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray  # bool per channel


@dataclass
class NormStats:
    """Per subject, per modality channel statistics over valid tokens."""

    eeg: dict[str, ChannelStats] = field(default_factory=dict)
    phys: dict[str, ChannelStats] = field(default_factory=dict)

    @property
    def subjects(self) -> list[str]:
        return sorted(self.eeg)

    def merged(self, other: "NormStats") -> "NormStats":
        return NormStats({**self.eeg, **other.eeg}, {**self.phys, **other.phys})

    def to_dict(self) -> dict:
        def enc(d):
            return {s: {"mean": c.mean.tolist(), "std": c.std.tolist(), "constant": c.constant.tolist()}
                    for s, c in sorted(d.items())}
        return {"eeg": enc(self.eeg), "phys": enc(self.phys)}


def _channel_stats(X: np.ndarray, tol: float = 1e-12) -> ChannelStats:
    if X.shape[0] == 0:
        D = X.shape[1]
        return ChannelStats(np.zeros(D), np.ones(D), np.ones(D, dtype=bool))
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    constant = std <= tol
    return ChannelStats(mean, np.where(constant, 1.0, std), constant)


def fit_norm_stats(windows: Sequence[ClipWindow]) -> NormStats:
    """Statistics from exactly the windows given (pass training-fold windows only)."""
    rows: dict[str, dict[str, list[np.ndarray]]] = {"eeg": defaultdict(list), "phys": defaultdict(list)}
    dims = {}
    for w in windows:
        for mod in ("eeg", "phys"):
            seq = getattr(w, mod)
            dims[mod] = seq.n_channels
            rows[mod][w.subject].append(seq.X[seq.m == 1.0])
    stats = NormStats()
    for mod in ("eeg", "phys"):
        target = getattr(stats, mod)
        for subject in sorted(rows[mod]):
            target[subject] = _channel_stats(np.concatenate(rows[mod][subject], axis=0).reshape(-1, dims[mod]))
    return stats


def normalize(windows: Sequence[ClipWindow], stats: NormStats) -> list[ClipWindow]:
    """``(x - mean) / std`` per subject and channel at valid tokens.

    Masked tokens are left as they are. Constant channels map to 0. Applying
    the transform twice is not the same as applying it once.
    """
    from dataclasses import replace

    out = []
    for w in windows:
        if w.subject not in stats.eeg or w.subject not in stats.phys:
            raise IngestError(f"no normalisation stats for subject {w.subject!r}")
        seqs = {}
        for mod in ("eeg", "phys"):
            seq = getattr(w, mod)
            cs = getattr(stats, mod)[w.subject]
            valid = (seq.m == 1.0)[:, None]
            z = np.where(cs.constant, 0.0, (seq.X - cs.mean) / cs.std)
            seqs[mod] = replace(seq, X=np.where(valid, z, seq.X))
        out.append(replace(w, **seqs))
    return out


def filter_coverage(windows: Sequence[ClipWindow], threshold: float = 0.6) -> list[ClipWindow]:
    kept = [w for w in windows if joint_coverage(w) >= threshold]
    if len(kept) < len(windows):
        log.info("coverage filter (>= %.2f) dropped %d of %d windows", threshold, len(windows) - len(kept), len(windows))
    return kept
