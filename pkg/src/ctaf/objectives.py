"""Training objectives, augmentations and the loss-weight curriculum."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import IO, Mapping

import numpy as np

from .model import FusionOutput, ModelConfig, ModelInputs, forward
from .numerics import MASK_VALUE, Tensor, ops

log = logging.getLogger(__name__)

TERMS = ("con", "align", "fuse", "inv", "var", "cov", "view", "cons", "sup")


@dataclass(frozen=True)
class LossWeights:
    T_con: float = 0.1
    beta: float = 1.0
    alpha_f: float = 0.5
    lam_inv: float = 1.0
    lam_var: float = 1.0
    lam_cov: float = 1.0
    lam_view: float = 0.5
    lam_cons: float = 0.2
    lam_sup: float = 0.1
    sigma_align: float = 1.0
    jitter_amp: float = 0.25

    def __post_init__(self):
        if not self.T_con > 0:
            raise ValueError(f"T_con must be positive, got {self.T_con}")
        if not self.sigma_align > 0:
            raise ValueError(f"sigma_align must be positive, got {self.sigma_align}")
        for f in fields(self):
            if f.name not in ("T_con", "sigma_align") and getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0, got {getattr(self, f.name)}")

    @classmethod
    def vicreg_standard(cls, **overrides) -> "LossWeights":
        """VICReg's customary 1 : 1 : 0.04 invariance/variance/covariance ratio."""
        return cls(**{"lam_inv": 1.0, "lam_var": 1.0, "lam_cov": 0.04, **overrides})

    def coefficient(self, term: str) -> float:
        if term == "con":
            return 1.0
        if term == "align":
            return self.beta
        if term == "fuse":
            return self.alpha_f
        return getattr(self, f"lam_{term}")

    def without_sup(self) -> "LossWeights":
        return replace(self, lam_sup=0.0)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AugmentConfig:
    rho_view: float = 0.1  # extra token-mask rate in the second view
    warp_frac: float = 0.1  # max knot displacement as a fraction of window length
    n_knots: int = 3
    modality_dropout: float = 0.1
    fuse_space: str = "z"  # "z": pre-projection clip vectors, "p": projections

    def __post_init__(self):
        if not 0.0 <= self.rho_view < 1.0:
            raise ValueError(f"rho_view must be in [0, 1), got {self.rho_view}")
        if not 0.0 <= self.warp_frac < 0.5 / (self.n_knots + 1):
            raise ValueError(f"warp_frac={self.warp_frac} too large for {self.n_knots} knots")
        if not 0.0 <= self.modality_dropout <= 1.0:
            raise ValueError(f"modality_dropout must be in [0, 1], got {self.modality_dropout}")
        if self.fuse_space not in ("z", "p"):
            raise ValueError(f"fuse_space must be 'z' or 'p', got {self.fuse_space!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def schedule(step: int, total_steps: int, maxima: LossWeights) -> LossWeights:
    """Linear ramp of beta and jitter_amp from 0 over the first half, then hold."""
    if not 0 <= step <= max(total_steps, 0):
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    half = total_steps / 2.0
    r = 1.0 if half <= 0 else min(1.0, step / half)
    return replace(maxima, beta=maxima.beta * r, jitter_amp=maxima.jitter_amp * r)


# --------------------------------------------------------------------------
# loss terms


def _zero() -> Tensor:
    return Tensor(np.zeros(()))


def info_nce(Z_e: Tensor, Z_p: Tensor, T: float) -> Tensor:
    """Symmetric InfoNCE over a batch of L2-normalised rows; matched pairs share an index."""
    B = Z_e.shape[0]
    logits = ops.scale(ops.matmul(Z_e, ops.transpose(Z_p, (1, 0))), 1.0 / T)
    diag = np.eye(B) / B
    row = ops.sum(ops.mul(ops.log_softmax(logits, axis=1), diag))
    col = ops.sum(ops.mul(ops.log_softmax(logits, axis=0), diag))
    return ops.scale(ops.add(row, col), -0.5)


def alignment_targets(
    t_e: np.ndarray, t_p: np.ndarray, m_e: np.ndarray, m_p: np.ndarray, sigma: float
) -> np.ndarray:
    """Gaussian soft targets W (B, S_e, S_p) over valid physiology keys.

    Rows of invalid queries, and rows with no valid key, are all zero.
    """
    t_e, t_p = np.atleast_2d(t_e), np.atleast_2d(t_p)
    m_e = np.atleast_2d(np.asarray(m_e, dtype=np.float64))
    m_p = np.atleast_2d(np.asarray(m_p, dtype=np.float64))
    delta = t_e[:, :, None] - t_p[:, None, :]
    logits = -(delta * delta) / (2.0 * sigma * sigma) + ((1.0 - m_p) * MASK_VALUE)[:, None, :]
    logits -= logits.max(axis=2, keepdims=True)
    w = np.exp(logits) * m_p[:, None, :]
    tot = w.sum(axis=2, keepdims=True)
    W = np.divide(w, tot, out=np.zeros_like(w), where=tot > 0)
    return W * m_e[:, :, None]


@dataclass
class AlignmentDiagnostics:
    W: np.ndarray
    skipped_rows: int  # valid EEG queries with no valid physiology key
    skipped_cols: int  # valid physiology tokens with no valid EEG query
    windows_used: int


def soft_alignment_loss(
    tok_e: Tensor,
    tok_p: Tensor,
    t_e: np.ndarray,
    t_p: np.ndarray,
    m_e: np.ndarray,
    m_p: np.ndarray,
    sigma: float,
    T: float,
) -> tuple[Tensor, AlignmentDiagnostics]:
    """Row/column soft cross-entropy between token similarities and Gaussian targets.

    Row targets are ``W``; column targets are ``W`` normalised down its columns.
    Each direction is averaged over valid positions of a window, then over the
    windows that have at least one usable position.
    """
    m_e = np.asarray(m_e, dtype=np.float64)
    m_p = np.asarray(m_p, dtype=np.float64)
    W = alignment_targets(t_e, t_p, m_e, m_p, sigma)
    colsum = W.sum(axis=1, keepdims=True)
    Wc = np.divide(W, colsum, out=np.zeros_like(W), where=colsum > 0)

    row_ok = W.sum(axis=2) > 0  # (B, S_e)
    col_ok = colsum[:, 0, :] > 0  # (B, S_p)
    skipped_rows = int(((m_e > 0) & ~row_ok).sum())
    skipped_cols = int(((m_p > 0) & ~col_ok).sum())
    n_row, n_col = row_ok.sum(axis=1), col_ok.sum(axis=1)
    used = (n_row > 0) & (n_col > 0)
    if not used.any():
        return _zero(), AlignmentDiagnostics(W, skipped_rows, skipped_cols, 0)

    n_used = used.sum()
    rw = np.where(used, 1.0 / np.maximum(n_row, 1) / n_used, 0.0)[:, None, None]
    cw = np.where(used, 1.0 / np.maximum(n_col, 1) / n_used, 0.0)[:, None, None]
    S = ops.scale(ops.matmul(tok_e, ops.swap_last(tok_p)), 1.0 / T)
    row_lp = ops.log_softmax(S, ops.mask_to_additive(m_p)[:, None, :], axis=2)
    col_lp = ops.log_softmax(S, ops.mask_to_additive(m_e)[:, :, None], axis=1)
    row = ops.sum(ops.mul(row_lp, W * rw))
    col = ops.sum(ops.mul(col_lp, Wc * cw))
    loss = ops.scale(ops.add(row, col), -0.5)
    return loss, AlignmentDiagnostics(W, skipped_rows, skipped_cols, int(n_used))


def _sq_dist_mean(a: Tensor, b: Tensor) -> Tensor:
    d = ops.sub(a, b)
    return ops.scale(ops.sum(ops.square(d)), 1.0 / a.shape[0])


def fuse_loss(f: Tensor, e: Tensor, p: Tensor) -> Tensor:
    """Batch mean of ||f - (e + p) / 2||^2."""
    return _sq_dist_mean(f, ops.scale(ops.add(e, p), 0.5))


def consistency_loss(z1: Tensor, z2: Tensor) -> Tensor:
    return _sq_dist_mean(z1, z2)


def _variance_penalty(x: Tensor, eps: float = 1e-4) -> Tensor:
    B = x.shape[0]
    xc = ops.sub(x, ops.mean(x, axis=0, keepdims=True))
    var = ops.scale(ops.sum(ops.square(xc), axis=0), 1.0 / (B - 1))
    std = ops.sqrt(ops.add_scalar(var, eps))
    return ops.mean(ops.relu(ops.sub(1.0, std)))


def _covariance_penalty(x: Tensor) -> Tensor:
    B, D = x.shape
    xc = ops.sub(x, ops.mean(x, axis=0, keepdims=True))
    C = ops.scale(ops.matmul(ops.transpose(xc, (1, 0)), xc), 1.0 / (B - 1))
    off = 1.0 - np.eye(D)
    return ops.scale(ops.sum(ops.mul(ops.square(C), off)), 1.0 / max(D * (D - 1), 1))


def vicreg(a: Tensor, b: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Invariance, variance and covariance penalties on two (B, D) batches."""
    inv = _sq_dist_mean(a, b)
    if a.shape[0] < 2:
        log.info("vicreg: batch of %d, variance and covariance terms skipped", a.shape[0])
        return inv, _zero(), _zero()
    var = ops.scale(ops.add(_variance_penalty(a), _variance_penalty(b)), 0.5)
    cov = ops.scale(ops.add(_covariance_penalty(a), _covariance_penalty(b)), 0.5)
    return inv, var, cov


def view_contrast(
    view1: FusionOutput,
    view2: FusionOutput,
    T: float,
    present_e: np.ndarray | None = None,
    present_p: np.ndarray | None = None,
) -> Tensor:
    """Within-modality InfoNCE between two views' clip projections, averaged over modalities.

    ``present_*`` restricts each modality to windows where that stream exists.
    """
    terms = []
    for a, b, present in ((view1.p_e, view2.p_e, present_e), (view1.p_p, view2.p_p, present_p)):
        if present is not None and not np.all(present):
            idx = np.flatnonzero(present)
            if idx.size == 0:
                continue
            a, b = ops.take(a, idx), ops.take(b, idx)
        terms.append(info_nce(a, b, T))
    if not terms:
        return _zero()
    return ops.scale(terms[0] if len(terms) == 1 else ops.add(*terms), 1.0 / len(terms))


@dataclass(frozen=True)
class LabelStats:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64).reshape(2)
        sigma = np.asarray(self.sigma, dtype=np.float64).reshape(2)
        if not (sigma > 0).all():
            raise ValueError(f"label sigma must be positive, got {sigma}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @classmethod
    def fit(cls, labels: np.ndarray) -> "LabelStats":
        """Per-dimension mean and (population) std over labeled rows."""
        y = np.asarray(labels, dtype=np.float64).reshape(-1, 2)
        y = y[np.isfinite(y).all(axis=1)]
        if len(y) == 0:
            raise ValueError("no labeled windows to fit label statistics")
        return cls(y.mean(axis=0), y.std(axis=0))

    def zscore(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - self.mu) / self.sigma

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "sigma": self.sigma.tolist()}


def supervised_loss(y_hat: Tensor, y: np.ndarray, label_mask: np.ndarray, stats: LabelStats) -> Tensor:
    """Mean over labeled windows of ||y_hat - z(y)||^2; unlabeled rows are excluded."""
    lm = np.asarray(label_mask, dtype=bool) & np.isfinite(y).all(axis=1)
    n = int(lm.sum())
    if n == 0:
        log.info("supervised_loss: no labeled windows in batch")
        return _zero()
    yz = np.where(lm[:, None], stats.zscore(np.nan_to_num(y)), 0.0)
    w = (lm / n)[:, None]
    d = ops.sub(y_hat, yz)
    return ops.sum(ops.mul(ops.square(d), w))


# --------------------------------------------------------------------------
# total objective


@dataclass
class LossBreakdown:
    con: float = 0.0
    align: float = 0.0
    fuse: float = 0.0
    inv: float = 0.0
    var: float = 0.0
    cov: float = 0.0
    view: float = 0.0
    cons: float = 0.0
    sup: float = 0.0
    total: float = 0.0
    weights: LossWeights = field(default_factory=LossWeights)

    def terms(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in TERMS}

    def weighted_sum(self) -> float:
        return float(sum(self.weights.coefficient(k) * v for k, v in self.terms().items()))


def total_loss(terms: Mapping[str, Tensor], weights: LossWeights) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum of the named terms. Missing terms count as 0."""
    unknown = set(terms) - set(TERMS)
    if unknown:
        raise KeyError(f"unknown loss terms: {sorted(unknown)}")
    total = None
    values = {}
    for k in TERMS:
        if k not in terms:
            continue
        t = terms[k]
        values[k] = float(t.data)
        c = weights.coefficient(k)
        part = t if c == 1.0 else ops.scale(t, c)
        total = part if total is None else ops.add(total, part)
    total = _zero() if total is None else total
    return total, LossBreakdown(**values, total=float(total.data), weights=weights)


# --------------------------------------------------------------------------
# augmentations


def time_jitter(t: np.ndarray, amp: float, rng: np.random.Generator) -> np.ndarray:
    """Independent uniform shift in [-amp, amp] for every token."""
    if amp <= 0:
        return np.array(t, dtype=np.float64)
    return t + rng.uniform(-amp, amp, size=np.shape(t))


def warp_knots(length: float, n_knots: int, frac: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Knot positions (x, y) of a monotone piecewise-linear remap of [0, length]."""
    x = np.linspace(0.0, length, n_knots + 2)
    y = x.copy()
    y[1:-1] += rng.uniform(-frac * length, frac * length, size=n_knots)
    return x, np.maximum.accumulate(y)


def time_warp(t: np.ndarray, lengths: np.ndarray, frac: float, rng: np.random.Generator, n_knots: int = 3) -> np.ndarray:
    """Warp each row of ``t`` (seconds from window start) by its own monotone remap."""
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    if frac <= 0:
        return t.copy()
    out = np.empty_like(t)
    for i, L in enumerate(np.broadcast_to(lengths, (t.shape[0],))):
        x, y = warp_knots(float(L), n_knots, frac, rng)
        # extrapolate linearly past the window edges so padded timestamps stay ordered
        out[i] = np.interp(t[i], x, y) + np.clip(t[i] - L, 0, None) + np.clip(t[i], None, 0)
    return out


def token_mask(m: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Drop valid tokens with probability ``rate`` while keeping at least one per row."""
    m = np.asarray(m, dtype=np.float64)
    if rate <= 0:
        return m.copy()
    drop = rng.random(m.shape) < rate
    out = np.where(drop, 0.0, m)
    lost = (out.sum(axis=1) == 0) & (m.sum(axis=1) > 0)
    for i in np.flatnonzero(lost):
        valid = np.flatnonzero(m[i])
        out[i, valid[rng.integers(len(valid))]] = 1.0
    return out


def augment_view(
    inputs: ModelInputs,
    lengths: np.ndarray,
    rng: np.random.Generator,
    jitter_amp: float,
    warp_frac: float = 0.0,
    rho: float = 0.0,
    n_knots: int = 3,
) -> ModelInputs:
    """One stochastic time view: optional warp, then jitter, then extra token masking."""
    t_e, t_p = inputs.t_e, inputs.t_p
    if warp_frac > 0:
        # one remap per window, shared by both streams
        state = rng.bit_generator.state
        t_e = time_warp(t_e, lengths, warp_frac, rng, n_knots)
        rng.bit_generator.state = state
        t_p = time_warp(t_p, lengths, warp_frac, rng, n_knots)
    t_e = time_jitter(t_e, jitter_amp, rng)
    t_p = time_jitter(t_p, jitter_amp, rng)
    m_e, m_p = inputs.m_e, inputs.m_p
    if rho > 0:
        m_e, m_p = token_mask(m_e, rho, rng), token_mask(m_p, rho, rng)
    X_e = inputs.X_e * m_e[..., None]
    X_p = inputs.X_p * m_p[..., None]
    return ModelInputs(X_e, t_e, m_e, X_p, t_p, m_p)


def modality_dropout(inputs, rate: float, rng: np.random.Generator):
    """Zero one whole stream (features and mask) per window with probability ``rate``.

    Works on :class:`ModelInputs` or :class:`Batch`. A stream is only dropped
    when the other one is present, so no window ends up with both invalid.
    Returns the new object and a (B,) array: 0 kept, 1 EEG dropped, 2 physiology dropped.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"dropout rate must be in [0, 1], got {rate}")
    B = inputs.m_e.shape[0]
    hit = rng.random(B) < rate
    coin = rng.random(B) < 0.5
    has_e = inputs.m_e.sum(axis=1) > 0
    has_p = inputs.m_p.sum(axis=1) > 0
    drop_e = hit & coin & has_p
    drop_p = hit & ~coin & has_e
    code = np.where(drop_e, 1, np.where(drop_p, 2, 0))
    if not (drop_e.any() or drop_p.any()):
        return inputs, code
    ke, kp = (~drop_e)[:, None], (~drop_p)[:, None]
    out = replace(
        inputs,
        X_e=inputs.X_e * ke[..., None], m_e=inputs.m_e * ke,
        X_p=inputs.X_p * kp[..., None], m_p=inputs.m_p * kp,
    )
    return out, code


# --------------------------------------------------------------------------
# full CTAF objective for one batch


@dataclass
class StepResult:
    loss: Tensor
    breakdown: LossBreakdown
    view1: FusionOutput
    align: AlignmentDiagnostics | None


def ctaf_objective(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    inputs: ModelInputs,
    lengths: np.ndarray,
    weights: LossWeights,
    aug: AugmentConfig,
    rng: np.random.Generator,
    labels: np.ndarray | None = None,
    label_mask: np.ndarray | None = None,
    label_stats: LabelStats | None = None,
    dropout: bool = True,
) -> StepResult:
    """All loss terms for one batch from two stochastic views.

    View 1 is time-jittered; view 2 is warped, jittered and token-masked.
    Cross-modal terms use view 1 on windows where both streams are present,
    with alignment targets from the un-jittered timestamps. The view term
    contrasts the two views within each modality and the consistency term
    compares their fused embeddings.
    """
    if dropout and aug.modality_dropout > 0:
        inputs, _ = modality_dropout(inputs, aug.modality_dropout, rng)
    v1 = augment_view(inputs, lengths, rng, weights.jitter_amp)
    v2 = augment_view(inputs, lengths, rng, weights.jitter_amp, aug.warp_frac, aug.rho_view, aug.n_knots)
    out1 = forward(params, cfg, v1)
    out2 = forward(params, cfg, v2)

    has_e, has_p = inputs.present_e > 0, inputs.present_p > 0
    both = np.flatnonzero(has_e & has_p)
    terms: dict[str, Tensor] = {}
    diag = None
    if both.size:
        full = both.size == inputs.m_e.shape[0]

        def sub(x: Tensor) -> Tensor:
            return x if full else ops.take(x, both)

        terms["con"] = info_nce(sub(out1.p_e), sub(out1.p_p), weights.T_con)
        sel = inputs if full else inputs.take(both)
        terms["align"], diag = soft_alignment_loss(
            sub(out1.tok_e), sub(out1.tok_p), sel.t_e, sel.t_p, sel.m_e, sel.m_p,
            weights.sigma_align, weights.T_con,
        )
        if aug.fuse_space == "z":
            terms["fuse"] = fuse_loss(sub(out1.z_f), sub(out1.z_e), sub(out1.z_p))
        else:
            terms["fuse"] = fuse_loss(sub(out1.p_f), sub(out1.p_e), sub(out1.p_p))
        terms["inv"], terms["var"], terms["cov"] = vicreg(sub(out1.raw_e), sub(out1.raw_p))
    terms["view"] = view_contrast(out1, out2, weights.T_con, has_e, has_p)
    terms["cons"] = consistency_loss(out1.z_f, out2.z_f)
    if labels is not None and label_stats is not None and weights.lam_sup > 0:
        lm = np.ones(len(labels), bool) if label_mask is None else label_mask
        terms["sup"] = supervised_loss(out1.y_hat, labels, lm, label_stats)
    loss, breakdown = total_loss(terms, weights)
    return StepResult(loss, breakdown, out1, diag)


class LossLog:
    """Tab-separated per-step LossBreakdown stream."""

    COLUMNS = ("epoch", "step", *TERMS, "total", "beta", "jitter_amp")

    def __init__(self, handle: IO[str]):
        self._w = csv.writer(handle, delimiter="\t", lineterminator="\n")
        self._w.writerow(self.COLUMNS)
        self._handle = handle

    def write(self, epoch: int, step: int, b: LossBreakdown) -> None:
        vals = [b.terms()[k] for k in TERMS] + [b.total, b.weights.beta, b.weights.jitter_amp]
        self._w.writerow([epoch, step, *(repr(float(v)) for v in vals)])

    def flush(self) -> None:
        self._handle.flush()


__all__ = [
    "AlignmentDiagnostics",
    "AugmentConfig",
    "LabelStats",
    "LossBreakdown",
    "LossLog",
    "LossWeights",
    "StepResult",
    "TERMS",
    "alignment_targets",
    "augment_view",
    "consistency_loss",
    "ctaf_objective",
    "fuse_loss",
    "info_nce",
    "modality_dropout",
    "schedule",
    "soft_alignment_loss",
    "supervised_loss",
    "time_jitter",
    "time_warp",
    "token_mask",
    "total_loss",
    "view_contrast",
    "vicreg",
]
