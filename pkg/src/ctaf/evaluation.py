"""Alignment metrics, the 3-bin affect probe and subject-level aggregation."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

METRICS = ("cos_pos", "cos_neg", "retr_e2p", "retr_p2e")


# --------------------------------------------------------------------------
# clip-level cosine margin


@dataclass(frozen=True)
class CosineMargin:
    cos_pos: float
    cos_neg: float  # NaN when fewer than two windows
    n: int

    @property
    def neg_defined(self) -> bool:
        return self.n >= 2

    @property
    def margin(self) -> float:
        return self.cos_pos - self.cos_neg


def cosine_margin(p_e: np.ndarray, p_p: np.ndarray) -> CosineMargin:
    """Mean matched cosine, and mean cosine against the next window (circular shift by one)."""
    p_e, p_p = np.asarray(p_e, dtype=float), np.asarray(p_p, dtype=float)
    if p_e.shape != p_p.shape or p_e.ndim != 2:
        raise ValueError(f"expected two (N, d) arrays of equal shape, got {p_e.shape} and {p_p.shape}")
    n = p_e.shape[0]
    if n == 0:
        raise ValueError("cosine_margin needs at least one window")
    pos = float(np.einsum("id,id->i", p_e, p_p).mean())
    if n < 2:
        log.warning("cosine_margin: one window, cos_neg undefined")
        return CosineMargin(pos, float("nan"), n)
    neg = float(np.einsum("id,id->i", p_e, np.roll(p_p, -1, axis=0)).mean())
    return CosineMargin(pos, neg, n)


# --------------------------------------------------------------------------
# token retrieval


@dataclass(frozen=True)
class RetrievalCount:
    hits: int
    queries: int
    excluded: int  # valid queries in windows without any valid target

    @property
    def rate(self) -> float:
        return self.hits / self.queries if self.queries else float("nan")

    def __add__(self, other: "RetrievalCount") -> "RetrievalCount":
        return RetrievalCount(self.hits + other.hits, self.queries + other.queries, self.excluded + other.excluded)


def _per_window(x, single_ndim: int) -> list:
    """A bare array of the single-window rank is one window; anything else is iterated."""
    if isinstance(x, np.ndarray) and x.ndim == single_ndim:
        return [x]
    return list(x)


def retrieval_counts(
    tok_q: Sequence[np.ndarray],
    tok_t: Sequence[np.ndarray],
    t_q: Sequence[np.ndarray],
    t_t: Sequence[np.ndarray],
    m_q: Sequence[np.ndarray],
    m_t: Sequence[np.ndarray],
    tau: float,
) -> RetrievalCount:
    """Nearest target token per valid query, within the query's own window.

    Arguments are per-window sequences (or a single window's arrays). A hit
    is a retrieved target within ``tau`` seconds of the query.
    """
    total = RetrievalCount(0, 0, 0)
    windows = zip(
        _per_window(tok_q, 2), _per_window(tok_t, 2),
        _per_window(t_q, 1), _per_window(t_t, 1), _per_window(m_q, 1), _per_window(m_t, 1),
    )
    for Q, K, tq, tt, mq, mt in windows:
        qv, kv = np.flatnonzero(np.asarray(mq) > 0), np.flatnonzero(np.asarray(mt) > 0)
        if qv.size == 0:
            continue
        if kv.size == 0:
            total += RetrievalCount(0, 0, int(qv.size))
            continue
        sim = np.asarray(Q)[qv] @ np.asarray(K)[kv].T
        best = kv[np.argmax(sim, axis=1)]
        hits = np.abs(np.asarray(tq)[qv] - np.asarray(tt)[best]) <= tau
        total += RetrievalCount(int(hits.sum()), int(qv.size), 0)
    return total


def retrieval_at_tau(tok_e, tok_p, t_e, t_p, m_e, m_p, tau: float, direction: str = "e2p") -> float:
    """Hit rate of within-window token retrieval; ``direction`` is "e2p" or "p2e"."""
    if direction == "e2p":
        return retrieval_counts(tok_e, tok_p, t_e, t_p, m_e, m_p, tau).rate
    if direction == "p2e":
        return retrieval_counts(tok_p, tok_e, t_p, t_e, m_p, m_e, tau).rate
    raise ValueError(f"direction must be 'e2p' or 'p2e', got {direction!r}")


def chance_rate(t_query, t_target, m_query, m_target, tau: float) -> float:
    """Expected hit rate of a uniformly random valid target, averaged over valid queries."""
    num, den = 0.0, 0
    windows = zip(*(_per_window(a, 1) for a in (t_query, t_target, m_query, m_target)))
    for tq, tt, mq, mt in windows:
        tq, tt = np.asarray(tq, float), np.asarray(tt, float)
        qv, kv = np.asarray(mq) > 0, np.asarray(mt) > 0
        if not qv.any() or not kv.any():
            continue
        within = np.abs(tq[qv][:, None] - tt[kv][None, :]) <= tau
        num += within.mean(axis=1).sum()
        den += int(qv.sum())
    return num / den if den else float("nan")


# --------------------------------------------------------------------------
# bootstrap and paired comparison


@dataclass(frozen=True)
class BootstrapCI:
    mean: float
    lo: float
    hi: float
    n: int
    degenerate: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def bootstrap_ci(values: Sequence[float], n_resamples: int = 10_000, level: float = 0.95, seed: int = 0) -> BootstrapCI:
    """Percentile bootstrap of the mean over subject-level values."""
    v = np.asarray(values, dtype=float)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("bootstrap_ci needs a non-empty 1-D array")
    mean = float(v.mean())
    if v.size < 2:
        log.warning("bootstrap_ci: single subject, interval is degenerate")
        return BootstrapCI(mean, mean, mean, 1, True)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, v.size, size=(n_resamples, v.size))
    means = v[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(means, [100 * alpha, 100 * (1 - alpha)])
    return BootstrapCI(mean, float(lo), float(hi), int(v.size))


@dataclass(frozen=True)
class PairedDelta:
    subjects: tuple[str, ...]
    deltas: np.ndarray
    ci: BootstrapCI
    median: float
    q1: float
    q3: float

    @property
    def n_positive(self) -> int:
        return int((self.deltas > 0).sum())

    def to_dict(self) -> dict:
        return {
            "subjects": list(self.subjects), "deltas": self.deltas.tolist(), "ci": self.ci.to_dict(),
            "median": self.median, "q1": self.q1, "q3": self.q3, "n_positive": self.n_positive,
        }


def paired_delta(
    with_values: dict[str, float], without_values: dict[str, float], n_resamples: int = 10_000, seed: int = 0
) -> PairedDelta:
    """Per-subject differences (with - without), their bootstrap CI, median and IQR."""
    if set(with_values) != set(without_values):
        raise ValueError(f"subject sets differ: {sorted(set(with_values) ^ set(without_values))}")
    subjects = tuple(sorted(with_values))
    d = np.array([with_values[s] - without_values[s] for s in subjects])
    q1, med, q3 = np.percentile(d, [25, 50, 75])
    return PairedDelta(subjects, d, bootstrap_ci(d, n_resamples, seed=seed), float(med), float(q1), float(q3))


# --------------------------------------------------------------------------
# per-subject alignment report


@dataclass
class SubjectAlignment:
    subject: str
    n_windows: int
    cos_pos: float
    cos_neg: float
    retr_e2p: float
    retr_p2e: float
    chance_e2p: float
    chance_p2e: float
    excluded_queries: int = 0
    mean_offset: float = float("nan")  # attention-weighted t_p - t_e, seconds

    def to_dict(self) -> dict:
        return asdict(self)


def expected_offset(align: Sequence[np.ndarray], t_e, t_p, m_e) -> float:
    """Mean over valid EEG tokens of the attention-weighted physiology time minus the EEG time."""
    num, den = 0.0, 0
    for A, te, tp, me in zip(align, t_e, t_p, m_e):
        rows = np.asarray(me) > 0
        mass = A.sum(axis=1)
        rows &= mass > 0
        if rows.any():
            num += float(((A[rows] @ tp) / mass[rows] - te[rows]).sum())
            den += int(rows.sum())
    return num / den if den else float("nan")


def subject_alignment(emb, tau: float = 1.0, subject: str | None = None) -> SubjectAlignment:
    """Alignment metrics for one subject's windows from an embedding bundle."""
    idx = [i for i, s in enumerate(emb.subjects) if subject is None or s == subject]
    if not idx:
        raise ValueError(f"no windows for subject {subject!r}")
    name = subject if subject is not None else emb.subjects[idx[0]]

    def pick(field_name):
        seq = getattr(emb, field_name)
        return [seq[i] for i in idx]

    cm = cosine_margin(emb.p_e[idx], emb.p_p[idx])
    tok_e, tok_p, t_e, t_p, m_e, m_p = (pick(k) for k in ("tok_e", "tok_p", "t_e", "t_p", "m_e", "m_p"))
    e2p = retrieval_counts(tok_e, tok_p, t_e, t_p, m_e, m_p, tau)
    p2e = retrieval_counts(tok_p, tok_e, t_p, t_e, m_p, m_e, tau)
    return SubjectAlignment(
        subject=name,
        n_windows=len(idx),
        cos_pos=cm.cos_pos,
        cos_neg=cm.cos_neg,
        retr_e2p=e2p.rate,
        retr_p2e=p2e.rate,
        chance_e2p=chance_rate(t_e, t_p, m_e, m_p, tau),
        chance_p2e=chance_rate(t_p, t_e, m_p, m_e, tau),
        excluded_queries=e2p.excluded + p2e.excluded,
        mean_offset=expected_offset(pick("align_e2p"), t_e, t_p, m_e),
    )


@dataclass
class AlignmentReport:
    tau: float
    rows: list[SubjectAlignment]
    macro: dict[str, BootstrapCI] = field(default_factory=dict)

    @classmethod
    def from_rows(cls, rows: Sequence[SubjectAlignment], tau: float, n_resamples: int = 10_000, seed: int = 0):
        rows = sorted(rows, key=lambda r: r.subject)
        macro = {}
        for k in (*METRICS, "chance_e2p", "chance_p2e"):
            vals = [getattr(r, k) for r in rows]
            macro[k] = bootstrap_ci(vals, n_resamples, seed=seed)
        return cls(tau, list(rows), macro)

    def values(self, metric: str) -> dict[str, float]:
        return {r.subject: getattr(r, metric) for r in self.rows}

    @property
    def subjects(self) -> list[str]:
        return [r.subject for r in self.rows]

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "subjects": [r.to_dict() for r in self.rows],
            "macro": {k: v.to_dict() for k, v in self.macro.items()},
        }


# --------------------------------------------------------------------------
# 3-bin probe


def discrete_bins(y: np.ndarray) -> np.ndarray:
    """Ratings {1,2} -> 0, {3} -> 1, {4,5} -> 2."""
    y = np.asarray(y, dtype=float)
    return np.where(y < 2.5, 0, np.where(y < 3.5, 1, 2))


def tertile_edges(y_train: np.ndarray) -> np.ndarray:
    y = np.asarray(y_train, dtype=float)
    return np.quantile(y[np.isfinite(y)], [1 / 3, 2 / 3])


def tertile_bins(y: np.ndarray, edges: np.ndarray) -> np.ndarray:
    return np.searchsorted(edges, np.asarray(y, dtype=float), side="right")


def confusion_matrix(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int = 3) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, int), np.asarray(y_pred, int)), 1)
    return cm


def macro_f1(cm: np.ndarray) -> float:
    """Unweighted mean of per-class F1; a class with no support and no predictions scores 0."""
    cm = np.asarray(cm, dtype=float)
    tp = np.diag(cm)
    denom = 2 * tp + (cm.sum(axis=0) - tp) + (cm.sum(axis=1) - tp)
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(f1.mean())


def accuracy(cm: np.ndarray) -> float:
    cm = np.asarray(cm, dtype=float)
    return float(np.trace(cm) / cm.sum()) if cm.sum() else float("nan")


@dataclass
class LinearProbe:
    """Multinomial logistic regression on standardised features, full-batch Adam."""

    n_classes: int = 3
    steps: int = 500
    lr: float = 0.05
    l2: float = 1e-3
    seed: int = 0
    W: np.ndarray | None = None
    b: np.ndarray | None = None
    mu: np.ndarray | None = None
    sd: np.ndarray | None = None
    classes: np.ndarray | None = None

    def fit(self, X: np.ndarray, y: np.ndarray) -> "LinearProbe":
        X, y = np.asarray(X, float), np.asarray(y, int)
        self.mu, self.sd = X.mean(axis=0), X.std(axis=0) + 1e-8
        Xs = (X - self.mu) / self.sd
        self.classes = np.unique(y)
        local = np.searchsorted(self.classes, y)
        K, D = len(self.classes), X.shape[1]
        Y = np.eye(K)[local]
        rng = np.random.default_rng(self.seed)
        W, b = rng.normal(scale=0.01, size=(D, K)), np.zeros(K)
        mW, vW, mb, vb = np.zeros_like(W), np.zeros_like(W), np.zeros_like(b), np.zeros_like(b)
        b1, b2, eps = 0.9, 0.999, 1e-8
        for t in range(1, self.steps + 1):
            logits = Xs @ W + b
            logits -= logits.max(axis=1, keepdims=True)
            P = np.exp(logits)
            P /= P.sum(axis=1, keepdims=True)
            G = (P - Y) / len(y)
            gW, gb = Xs.T @ G + self.l2 * W, G.sum(axis=0)
            mW = b1 * mW + (1 - b1) * gW
            vW = b2 * vW + (1 - b2) * gW * gW
            mb = b1 * mb + (1 - b1) * gb
            vb = b2 * vb + (1 - b2) * gb * gb
            c1, c2 = 1 - b1 ** t, 1 - b2 ** t
            W -= self.lr * (mW / c1) / (np.sqrt(vW / c2) + eps)
            b -= self.lr * (mb / c1) / (np.sqrt(vb / c2) + eps)
        self.W, self.b = W, b
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        Xs = (np.asarray(X, float) - self.mu) / self.sd
        return self.classes[np.argmax(Xs @ self.W + self.b, axis=1)]


@dataclass
class ProbeScore:
    accuracy: float
    macro_f1: float
    n: int
    missing_train_classes: tuple[int, ...] = ()
    confusion: np.ndarray | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusion"] = None if self.confusion is None else self.confusion.tolist()
        d["missing_train_classes"] = list(self.missing_train_classes)
        return d


DIMENSIONS = ("arousal", "valence")


def _bins_for(y_train: np.ndarray, y: np.ndarray, mode: str) -> np.ndarray:
    if mode == "discrete":
        return discrete_bins(y)
    if mode == "tertile":
        return tertile_bins(y, tertile_edges(y_train))
    raise ValueError(f"binning mode must be 'discrete' or 'tertile', got {mode!r}")


def binning_mode(labels: np.ndarray) -> str:
    """Integer ratings use the fixed rating bins; anything continuous uses training tertiles."""
    y = np.asarray(labels, float)
    y = y[np.isfinite(y)]
    return "discrete" if y.size and np.all(y == np.round(y)) else "tertile"


def score_bins(true_bins: np.ndarray, pred_bins: np.ndarray, missing=()) -> ProbeScore:
    cm = confusion_matrix(true_bins, pred_bins)
    return ProbeScore(accuracy(cm), macro_f1(cm), int(len(true_bins)), tuple(missing), cm)


def three_bin_probe(
    X_train: np.ndarray,
    y_train: np.ndarray,
    X_test: np.ndarray,
    y_test: np.ndarray,
    mode: str | None = None,
    seed: int = 0,
) -> dict[str, ProbeScore]:
    """Linear probe per label dimension on frozen clip embeddings."""
    y_train, y_test = np.asarray(y_train, float), np.asarray(y_test, float)
    mode = binning_mode(y_train) if mode is None else mode
    out = {}
    for j, dim in enumerate(DIMENSIONS):
        tr = np.isfinite(y_train[:, j])
        te = np.isfinite(y_test[:, j])
        ytr = _bins_for(y_train[tr, j], y_train[tr, j], mode)
        yte = _bins_for(y_train[tr, j], y_test[te, j], mode)
        missing = tuple(int(c) for c in range(3) if c not in set(ytr.tolist()))
        if missing:
            log.warning("probe %s: training fold lacks classes %s", dim, missing)
        probe = LinearProbe(seed=seed).fit(X_train[tr], ytr)
        out[dim] = score_bins(yte, probe.predict(X_test[te]), missing)
    return out


def head_bin_scores(
    y_hat_z: np.ndarray, mu: np.ndarray, sigma: np.ndarray, y_train: np.ndarray, y_test: np.ndarray, mode: str | None = None
) -> dict[str, ProbeScore]:
    """Secondary mode: bin the regression head's de-standardised predictions."""
    y_pred = np.asarray(y_hat_z) * sigma + mu
    y_train, y_test = np.asarray(y_train, float), np.asarray(y_test, float)
    mode = binning_mode(y_train) if mode is None else mode
    out = {}
    for j, dim in enumerate(DIMENSIONS):
        tr, te = np.isfinite(y_train[:, j]), np.isfinite(y_test[:, j])
        yte = _bins_for(y_train[tr, j], y_test[te, j], mode)
        ypr = _bins_for(y_train[tr, j], y_pred[te, j], mode)
        out[dim] = score_bins(yte, ypr)
    return out


__all__ = [
    "AlignmentReport",
    "BootstrapCI",
    "CosineMargin",
    "DIMENSIONS",
    "LinearProbe",
    "METRICS",
    "PairedDelta",
    "ProbeScore",
    "RetrievalCount",
    "SubjectAlignment",
    "accuracy",
    "binning_mode",
    "bootstrap_ci",
    "chance_rate",
    "confusion_matrix",
    "cosine_margin",
    "discrete_bins",
    "expected_offset",
    "head_bin_scores",
    "macro_f1",
    "paired_delta",
    "retrieval_at_tau",
    "retrieval_counts",
    "subject_alignment",
    "tertile_bins",
    "tertile_edges",
    "three_bin_probe",
]
