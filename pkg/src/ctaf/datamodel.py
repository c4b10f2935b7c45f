"""Per-window modality sequences, batching and the line-delimited record format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

RECORD_VERSION = 1
D_EEG = 10
D_PHYS = 4


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ModalSequence:
    """One modality inside a window: tokens ``X`` (S, D), timestamps ``t`` (S,), mask ``m`` (S,)."""

    X: np.ndarray
    t: np.ndarray
    m: np.ndarray
    empty: bool = False

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1) if X.size else X.reshape(0, 0)
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "t", _frozen(np.asarray(self.t, dtype=np.float64).reshape(-1)))
        object.__setattr__(self, "m", _frozen(np.asarray(self.m, dtype=np.float64).reshape(-1)))

    @property
    def n_tokens(self) -> int:
        return int(self.t.shape[0])

    @property
    def n_channels(self) -> int:
        return int(self.X.shape[1])

    @property
    def n_valid(self) -> int:
        return int(self.m.sum())

    def equals(self, other: "ModalSequence") -> bool:
        """Bit-exact comparison (NaN-safe)."""
        return (
            self.X.shape == other.X.shape
            and np.array_equal(self.X, other.X, equal_nan=True)
            and np.array_equal(self.t, other.t, equal_nan=True)
            and np.array_equal(self.m, other.m)
            and self.empty == other.empty
        )


@dataclass(frozen=True, eq=False)
class ClipWindow:
    eeg: ModalSequence
    phys: ModalSequence
    subject: str
    label: tuple[float, float] | None = None
    window_span: tuple[float, float] = (0.0, 5.0)
    clip_id: str = ""

    def equals(self, other: "ClipWindow") -> bool:
        same_label = (self.label is None and other.label is None) or (
            self.label is not None and other.label is not None
            and np.array_equal(np.asarray(self.label), np.asarray(other.label))
        )
        return (
            self.eeg.equals(other.eeg)
            and self.phys.equals(other.phys)
            and self.subject == other.subject
            and same_label
            and tuple(self.window_span) == tuple(other.window_span)
            and self.clip_id == other.clip_id
        )


@dataclass(frozen=True)
class Violation:
    field: str
    kind: str
    detail: str


class WindowValidationError(ValueError):
    def __init__(self, violations: Sequence[Violation]):
        self.violations = list(violations)
        super().__init__("; ".join(f"{v.field}: {v.kind} ({v.detail})" for v in self.violations))


def _check_sequence(seq: ModalSequence, name: str, span: tuple[float, float]) -> list[Violation]:
    out = []
    S = seq.t.shape[0]
    if seq.X.shape[0] != S or seq.m.shape[0] != S:
        out.append(Violation(name, "shape", f"X rows {seq.X.shape[0]}, t {S}, m {seq.m.shape[0]}"))
        return out
    if not np.isin(seq.m, (0.0, 1.0)).all():
        out.append(Violation(name, "mask_domain", "mask entries must be 0 or 1"))
    if not np.isfinite(seq.t).all():
        out.append(Violation(name, "timestamps", "non-finite timestamp"))
    elif S > 1 and (np.diff(seq.t) < 0).any():
        i = int(np.argmax(np.diff(seq.t) < 0))
        out.append(Violation(name, "monotonicity", f"t[{i + 1}]={seq.t[i + 1]} < t[{i}]={seq.t[i]}"))
    elif S and (seq.t.min() < span[0] or seq.t.max() > span[1]):
        out.append(Violation(name, "span", f"timestamps outside window {span}"))
    valid = seq.m == 1.0
    bad_rows = valid & ~np.isfinite(seq.X).all(axis=1)
    if bad_rows.any():
        out.append(Violation(name, "non_finite", f"non-finite features at valid tokens {np.flatnonzero(bad_rows).tolist()}"))
    if S and not valid.any() and not seq.empty:
        out.append(Violation(name, "no_valid_tokens", "no valid token and not flagged empty"))
    return out


def check_window(window: ClipWindow) -> list[Violation]:
    """All contract violations of ``window`` (empty list means well-formed)."""
    span = tuple(window.window_span)
    out = _check_sequence(window.eeg, "eeg", span) + _check_sequence(window.phys, "phys", span)
    if window.label is not None and not np.isfinite(np.asarray(window.label, dtype=float)).all():
        out.append(Violation("label", "non_finite", f"label {window.label}"))
    return out


def validate_window(window: ClipWindow) -> ClipWindow:
    """Return a checked copy of ``window``; masked non-finite values are zeroed.

    Raises:
        WindowValidationError: carrying the structured violation list.
    """
    violations = check_window(window)
    if violations:
        raise WindowValidationError(violations)

    def clean(seq: ModalSequence) -> ModalSequence:
        if np.isfinite(seq.X).all():
            return seq
        X = np.where(np.isfinite(seq.X), seq.X, 0.0)
        return replace(seq, X=X)

    return replace(window, eeg=clean(window.eeg), phys=clean(window.phys))


# --------------------------------------------------------------------------
# joint coverage


def _covered_bins(seq: ModalSequence, span: tuple[float, float], centers: np.ndarray) -> np.ndarray:
    start, end = span
    S = seq.n_tokens
    covered = np.zeros(centers.shape[0], dtype=bool)
    if S == 0:
        return covered
    width = (end - start) / S
    own = np.clip(np.floor((seq.t[seq.m == 1.0] - start) / width), 0, S - 1)
    lo = start + own * width
    hi = lo + width
    for a, b in zip(lo, hi):
        covered |= (centers >= a) & (centers < b)
    return covered


def joint_coverage(window: ClipWindow) -> float:
    """Fraction of union-grid bins where both modalities have a valid token.

    The union grid splits the window span into ``max(S_e, S_p)`` equal bins.
    Each valid token covers the bin of its own modality's grid that contains
    its timestamp, so modalities sampled at different rates are compared on
    the finer grid.
    """
    n = max(window.eeg.n_tokens, window.phys.n_tokens)
    if n == 0:
        return 0.0
    start, end = window.window_span
    centers = start + (np.arange(n) + 0.5) * (end - start) / n
    both = _covered_bins(window.eeg, window.window_span, centers) & _covered_bins(
        window.phys, window.window_span, centers
    )
    return float(both.sum()) / n


# --------------------------------------------------------------------------
# batching


@dataclass(eq=False)
class Batch:
    """Windows padded to a common token count S; pads have m=0, X=0, t=window end."""

    X_e: np.ndarray
    t_e: np.ndarray
    m_e: np.ndarray
    X_p: np.ndarray
    t_p: np.ndarray
    m_p: np.ndarray
    labels: np.ndarray  # (B, 2), NaN where unlabeled
    label_mask: np.ndarray  # (B,)
    subjects: list[str]
    spans: np.ndarray  # (B, 2)
    lengths_e: np.ndarray
    lengths_p: np.ndarray
    windows: list[ClipWindow] = field(default_factory=list, repr=False)

    @property
    def size(self) -> int:
        return int(self.X_e.shape[0])

    @property
    def m_union(self) -> np.ndarray:
        return np.maximum(self.m_e, self.m_p)

    @property
    def present_e(self) -> np.ndarray:
        return (self.m_e.sum(axis=1) > 0).astype(np.float64)

    @property
    def present_p(self) -> np.ndarray:
        return (self.m_p.sum(axis=1) > 0).astype(np.float64)

    def with_arrays(self, **changes) -> "Batch":
        return replace(self, **changes)


def collate(windows: Sequence[ClipWindow]) -> Batch:
    """Pad windows to a shared token count without touching valid content.

    Both modalities are padded to the same S so fused token sequences line up.
    """
    if not windows:
        raise ValueError("collate needs at least one window")
    De = {w.eeg.n_channels for w in windows}
    Dp = {w.phys.n_channels for w in windows}
    if len(De) != 1 or len(Dp) != 1:
        raise ValueError(f"mixed channel counts in batch: eeg {sorted(De)}, phys {sorted(Dp)}")
    De, Dp = De.pop(), Dp.pop()
    B = len(windows)
    S = max(max(w.eeg.n_tokens, w.phys.n_tokens) for w in windows)
    spans = np.array([w.window_span for w in windows], dtype=np.float64)

    def pad(attr: str, D: int):
        X = np.zeros((B, S, D))
        t = np.repeat(spans[:, 1:2], S, axis=1)
        m = np.zeros((B, S))
        lengths = np.zeros(B, dtype=np.int64)
        for i, w in enumerate(windows):
            seq = getattr(w, attr)
            n = seq.n_tokens
            X[i, :n] = np.where(np.isfinite(seq.X), seq.X, 0.0) if n else 0.0
            t[i, :n] = seq.t
            m[i, :n] = seq.m
            lengths[i] = n
        return X, t, m, lengths

    X_e, t_e, m_e, len_e = pad("eeg", De)
    X_p, t_p, m_p, len_p = pad("phys", Dp)
    labels = np.full((B, 2), np.nan)
    for i, w in enumerate(windows):
        if w.label is not None:
            labels[i] = w.label
    return Batch(
        X_e=X_e, t_e=t_e, m_e=m_e, X_p=X_p, t_p=t_p, m_p=m_p,
        labels=labels,
        label_mask=np.isfinite(labels).all(axis=1).astype(np.float64),
        subjects=[w.subject for w in windows],
        spans=spans,
        lengths_e=len_e, lengths_p=len_p,
        windows=list(windows),
    )


def unpad(batch: Batch) -> list[ClipWindow]:
    """Inverse of :func:`collate` for validated (all-finite) windows."""
    out = []
    for i in range(batch.size):
        ne, np_ = int(batch.lengths_e[i]), int(batch.lengths_p[i])
        src = batch.windows[i] if batch.windows else None
        label = None if not batch.label_mask[i] else (float(batch.labels[i, 0]), float(batch.labels[i, 1]))
        out.append(ClipWindow(
            eeg=ModalSequence(batch.X_e[i, :ne], batch.t_e[i, :ne], batch.m_e[i, :ne],
                              empty=src.eeg.empty if src else False),
            phys=ModalSequence(batch.X_p[i, :np_], batch.t_p[i, :np_], batch.m_p[i, :np_],
                               empty=src.phys.empty if src else False),
            subject=batch.subjects[i],
            label=label,
            window_span=(float(batch.spans[i, 0]), float(batch.spans[i, 1])),
            clip_id=src.clip_id if src else "",
        ))
    return out


def iter_batches(windows: Sequence[ClipWindow], batch_size: int, order: Sequence[int] | None = None) -> Iterator[Batch]:
    idx = np.arange(len(windows)) if order is None else np.asarray(order)
    for lo in range(0, len(idx), batch_size):
        yield collate([windows[i] for i in idx[lo:lo + batch_size]])


# --------------------------------------------------------------------------
# record format (JSON lines)


def _seq_to_dict(seq: ModalSequence) -> dict:
    X = np.where(np.isfinite(seq.X), seq.X, 0.0)
    return {"X": X.tolist(), "t": seq.t.tolist(), "m": seq.m.astype(int).tolist(), "empty": seq.empty}


def _seq_from_dict(d: dict, n_channels: int) -> ModalSequence:
    X = np.asarray(d["X"], dtype=np.float64).reshape(len(d["t"]), n_channels)
    return ModalSequence(X, d["t"], d["m"], empty=bool(d.get("empty", False)))


def window_to_record(window: ClipWindow) -> dict:
    return {
        "version": RECORD_VERSION,
        "clip_id": window.clip_id,
        "subject": window.subject,
        "span": [float(window.window_span[0]), float(window.window_span[1])],
        "label": None if window.label is None else [float(v) for v in window.label],
        "eeg": {"channels": window.eeg.n_channels, **_seq_to_dict(window.eeg)},
        "phys": {"channels": window.phys.n_channels, **_seq_to_dict(window.phys)},
    }


def window_from_record(rec: dict) -> ClipWindow:
    version = rec.get("version")
    if version != RECORD_VERSION:
        raise ValueError(f"unsupported window record version {version!r}")
    label = rec.get("label")
    return ClipWindow(
        eeg=_seq_from_dict(rec["eeg"], rec["eeg"]["channels"]),
        phys=_seq_from_dict(rec["phys"], rec["phys"]["channels"]),
        subject=str(rec["subject"]),
        label=None if label is None else (float(label[0]), float(label[1])),
        window_span=(float(rec["span"][0]), float(rec["span"][1])),
        clip_id=str(rec.get("clip_id", "")),
    )


def write_windows(path, windows: Iterable[ClipWindow]) -> None:
    from .numerics.checkpoint import atomic_write_bytes

    lines = [json.dumps(window_to_record(w), sort_keys=True, separators=(",", ":")) for w in windows]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_windows(path) -> list[ClipWindow]:
    out = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(window_from_record(json.loads(line)))
    return out
