"""Synthetic two-modality windows with known cross-modal lags.

A slow multivariate AR(1) latent is sampled on a 50 Hz grid. EEG-like tokens
read the latent out at bin centres through a subject-specific linear map;
physiology-like tokens read a moving-average-smoothed copy of the latent at
``bin centre - lag`` through a second subject-specific map. Labels are a
monotone squashing of the clip-mean latent onto a 1..5 annotation scale.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datamodel import D_EEG, D_PHYS, ClipWindow, ModalSequence
from .seeding import derive_rng


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 8
    clips_per_subject: int = 120
    lag_range: tuple[float, float] = (0.5, 2.0)
    dropout_rate: float = 0.1
    noise_std: float = 0.3
    ar_coefficient: float = 0.9
    seed: int = 0
    window_length: float = 5.0
    n_bins: int = 20
    fine_rate: float = 50.0
    latent_dim: int = 4
    smoothing_s: float = 0.2
    lag_mode: str = "constant"  # or "drift"
    drift_s: float = 0.5  # lag change across the window in drift mode

    def __post_init__(self):
        lo, hi = self.lag_range
        if not (0.0 <= lo <= hi < self.window_length):
            raise ValueError(f"lag_range {self.lag_range} must lie within [0, window_length)")
        if not 0.0 <= self.dropout_rate <= 0.5:
            raise ValueError("dropout_rate must be in [0, 0.5]")
        if not 0.0 < self.ar_coefficient < 1.0:
            raise ValueError("ar_coefficient must be in (0, 1)")
        if self.n_subjects < 1 or self.clips_per_subject < 1 or self.n_bins < 1:
            raise ValueError("counts must be positive")
        if self.lag_mode not in ("constant", "drift"):
            raise ValueError(f"unknown lag_mode {self.lag_mode!r}")
        if self.latent_dim < 2:
            raise ValueError("latent_dim must be >= 2 (arousal and valence sources)")

    @property
    def bin_width(self) -> float:
        return self.window_length / self.n_bins


@dataclass
class GroundTruth:
    clip_id: str
    subject: str
    clip_index: int
    lag: float
    token_lags: np.ndarray  # lag at each phys token (constant mode: all equal)
    latent_t: np.ndarray = field(repr=False)
    latent: np.ndarray = field(repr=False)  # (n_fine, latent_dim)
    label_source: np.ndarray = field(repr=False)  # clip-mean latent, first two dims
    eeg_clean: np.ndarray = field(repr=False)  # noiseless EEG readout (S, D_e)
    phys_clean: np.ndarray = field(repr=False)


def subject_id(index: int) -> str:
    return f"S{index + 1:02d}"


_rng = derive_rng


@dataclass(frozen=True)
class SubjectMixing:
    eeg_readout: np.ndarray  # (D_e, k)
    eeg_offset: np.ndarray
    phys_readout: np.ndarray  # (D_p, k)
    phys_offset: np.ndarray


def subject_mixing(config: SynthConfig, subject: int) -> SubjectMixing:
    rng = _rng(config.seed, "mixing", subject)
    k = config.latent_dim
    return SubjectMixing(
        eeg_readout=rng.normal(size=(D_EEG, k)) / np.sqrt(k),
        eeg_offset=rng.normal(scale=2.0, size=D_EEG),
        phys_readout=rng.normal(size=(D_PHYS, k)) / np.sqrt(k),
        phys_offset=rng.normal(scale=2.0, size=D_PHYS),
    )


def _ar1(rng: np.random.Generator, n: int, k: int, a: float) -> np.ndarray:
    z = np.empty((n, k))
    z[0] = rng.normal(size=k)
    innov = rng.normal(scale=np.sqrt(1.0 - a * a), size=(n, k))
    for i in range(1, n):
        z[i] = a * z[i - 1] + innov[i]
    return z


def _interp(t_query: np.ndarray, t_grid: np.ndarray, values: np.ndarray) -> np.ndarray:
    return np.stack([np.interp(t_query, t_grid, values[:, j]) for j in range(values.shape[1])], axis=1)


def label_scale(config: SynthConfig) -> float:
    """Stationary std of the clip-mean latent; used to spread labels over the scale."""
    a = config.ar_coefficient
    n = config.window_length * config.fine_rate
    return float(np.sqrt((1 + a) / (1 - a) / n))


def generate_clip(config: SynthConfig, subject: int, clip_index: int) -> tuple[ClipWindow, GroundTruth]:
    rng = _rng(config.seed, "clip", subject, clip_index)
    mix = subject_mixing(config, subject)
    W, S, k = config.window_length, config.n_bins, config.latent_dim
    centers = (np.arange(S) + 0.5) * config.bin_width

    lag = float(rng.uniform(*config.lag_range))
    if config.lag_mode == "constant":
        token_lags = np.full(S, lag)
    else:
        token_lags = lag + config.drift_s * (centers / W - 0.5)
        token_lags = np.clip(token_lags, 0.0, None)

    dt = 1.0 / config.fine_rate
    t0 = -(float(token_lags.max()) + config.smoothing_s + 0.5)
    n = int(np.ceil((W - t0) / dt)) + 1
    t_grid = t0 + np.arange(n) * dt
    z = _ar1(rng, n, k, config.ar_coefficient)

    width = max(1, int(round(config.smoothing_s * config.fine_rate)))
    kernel = np.ones(width) / width
    z_smooth = np.stack([np.convolve(z[:, j], kernel, mode="same") for j in range(k)], axis=1)

    eeg_clean = _interp(centers, t_grid, z) @ mix.eeg_readout.T + mix.eeg_offset
    phys_clean = _interp(centers - token_lags, t_grid, z_smooth) @ mix.phys_readout.T + mix.phys_offset
    eeg = eeg_clean + rng.normal(scale=config.noise_std, size=eeg_clean.shape)
    phys = phys_clean + rng.normal(scale=config.noise_std, size=phys_clean.shape)

    def draw_mask() -> np.ndarray:
        m = (rng.random(S) >= config.dropout_rate).astype(np.float64)
        if not m.any():
            m[rng.integers(S)] = 1.0
        return m

    m_e, m_p = draw_mask(), draw_mask()

    inside = (t_grid >= 0.0) & (t_grid < W)
    source = z[inside, :2].mean(axis=0)
    label = 3.0 + 2.0 * np.tanh(source / label_scale(config))

    clip_id = f"{subject_id(subject)}-{clip_index:04d}"
    window = ClipWindow(
        eeg=ModalSequence(eeg, centers, m_e),
        phys=ModalSequence(phys, centers, m_p),
        subject=subject_id(subject),
        label=(float(label[0]), float(label[1])),
        window_span=(0.0, W),
        clip_id=clip_id,
    )
    truth = GroundTruth(
        clip_id=clip_id, subject=subject_id(subject), clip_index=clip_index, lag=lag,
        token_lags=token_lags, latent_t=t_grid, latent=z, label_source=source,
        eeg_clean=eeg_clean, phys_clean=phys_clean,
    )
    return window, truth


def _generate_subject(args):
    config, subject = args
    return [generate_clip(config, subject, c) for c in range(config.clips_per_subject)]


def generate_dataset(config: SynthConfig, workers: int = 1) -> tuple[list[ClipWindow], list[GroundTruth]]:
    """All clips for all subjects, subject-major order. Output does not depend on ``workers``."""
    jobs = [(config, s) for s in range(config.n_subjects)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_subject = list(pool.map(_generate_subject, jobs))
    else:
        per_subject = [_generate_subject(j) for j in jobs]
    windows, truths = [], []
    for clips in per_subject:
        for w, g in clips:
            windows.append(w)
            truths.append(g)
    return windows, truths


def estimate_lag(eeg: np.ndarray, phys: np.ndarray, mix: SubjectMixing, bin_width: float, max_shift: int) -> float:
    """Brute-force cross-correlation lag between two noiseless readouts.

    Both readouts are mapped back to latent space by least squares, then the
    integer token shift maximising the mean latent correlation is returned in
    seconds (positive: physiology trails EEG).
    """
    ze = np.linalg.lstsq(mix.eeg_readout, (eeg - mix.eeg_offset).T, rcond=None)[0].T
    zp = np.linalg.lstsq(mix.phys_readout, (phys - mix.phys_offset).T, rcond=None)[0].T
    S = ze.shape[0]
    best, best_shift = -np.inf, 0
    for shift in range(0, max_shift + 1):
        a, b = ze[: S - shift], zp[shift:]
        a = (a - a.mean(0)) / (a.std(0) + 1e-12)
        b = (b - b.mean(0)) / (b.std(0) + 1e-12)
        score = float((a * b).mean())
        if score > best:
            best, best_shift = score, shift
    return best_shift * bin_width


def write_ground_truth(path, truths: Sequence[GroundTruth]) -> None:
    from .numerics.checkpoint import atomic_write_bytes
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["clip_id", "subject", "clip_index", "lag_s"])
    for g in truths:
        writer.writerow([g.clip_id, g.subject, g.clip_index, repr(float(g.lag))])
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def read_ground_truth(path) -> dict[str, float]:
    with Path(path).open(newline="") as fh:
        return {row["clip_id"]: float(row["lag_s"]) for row in csv.DictReader(fh)}


def config_dict(config: SynthConfig) -> dict:
    d = asdict(config)
    d["lag_range"] = list(config.lag_range)
    return d
