"""Leave-one-subject-out training: fold plans, fold data preparation, the optimisation loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import IO, Sequence

import numpy as np

from .datamodel import ClipWindow, collate
from .ingest import NormStats, filter_coverage, fit_norm_stats, normalize
from .model import ModelConfig, ModelInputs, forward, init_params
from .numerics import AdamW, NumericError, backward, parameters
from .objectives import (
    AugmentConfig,
    LabelStats,
    LossBreakdown,
    LossLog,
    LossWeights,
    TERMS,
    ctaf_objective,
    schedule,
)
from .seeding import derive_rng, derive_seed

log = logging.getLogger(__name__)


class TrainingDiverged(NumericError):
    """A fold produced a non-finite loss or gradient."""


@dataclass(frozen=True)
class FoldPlan:
    index: int
    held_out: str
    train_subjects: tuple[str, ...]
    val_subject: str

    def __post_init__(self):
        if self.held_out in self.train_subjects:
            raise ValueError(f"held-out subject {self.held_out} also listed for training")
        if self.val_subject not in self.train_subjects:
            raise ValueError(f"validation subject {self.val_subject} is not a training subject")

    @property
    def fit_subjects(self) -> tuple[str, ...]:
        """Subjects whose windows drive gradient steps."""
        if len(self.train_subjects) == 1:
            return self.train_subjects
        return tuple(s for s in self.train_subjects if s != self.val_subject)


def loocv_splits(subjects: Sequence[str]) -> list[FoldPlan]:
    """One fold per subject; the validation subject is the next subject in sorted order."""
    subs = sorted(set(subjects))
    if len(subs) < 2:
        raise ValueError(f"leave-one-subject-out needs >= 2 subjects, got {len(subs)}")
    plans = []
    for i, held in enumerate(subs):
        train = tuple(s for s in subs if s != held)
        plans.append(FoldPlan(i, held, train, subs[(i + 1) % len(subs)] if len(subs) > 2 else train[0]))
    return plans


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    use_time: bool = True
    coverage_threshold: float = 0.6
    weights: LossWeights = field(default_factory=LossWeights)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")
        if self.model.use_time != self.use_time:
            object.__setattr__(self, "model", replace(self.model, use_time=self.use_time))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FoldData:
    train: list[ClipWindow]
    val: list[ClipWindow]
    test: list[ClipWindow]
    norm_stats: NormStats  # fit on training subjects only
    test_norm_stats: NormStats  # the held-out subject's own feature statistics
    label_stats: LabelStats


def prepare_fold(plan: FoldPlan, windows: Sequence[ClipWindow], coverage_threshold: float = 0.6) -> FoldData:
    """Split, coverage-filter and normalise the windows of one fold.

    Training subjects are normalised with statistics from their own windows
    in this fold; label statistics come from the gradient-step windows. The
    held-out subject is standardised with its own feature statistics, kept
    apart so nothing about it reaches training or model selection.
    """
    by_subject: dict[str, list[ClipWindow]] = {}
    for w in filter_coverage(windows, coverage_threshold):
        by_subject.setdefault(w.subject, []).append(w)
    missing = [s for s in (plan.held_out, *plan.train_subjects) if s not in by_subject]
    if missing:
        raise ValueError(f"no windows left for subjects {missing}")

    train_raw = [w for s in plan.fit_subjects for w in by_subject[s]]
    val_raw = by_subject[plan.val_subject]
    test_raw = by_subject[plan.held_out]
    pool = [w for s in plan.train_subjects for w in by_subject[s]]
    norm = fit_norm_stats(pool)
    test_norm = fit_norm_stats(test_raw)
    labels = np.array([w.label if w.label is not None else (np.nan, np.nan) for w in train_raw], dtype=float)
    return FoldData(
        train=normalize(train_raw, norm),
        val=normalize(val_raw, norm),
        test=normalize(test_raw, test_norm),
        norm_stats=norm,
        test_norm_stats=test_norm,
        label_stats=LabelStats.fit(labels),
    )


@dataclass
class EpochRecord:
    epoch: int
    train_total: float
    val_objective: float
    seconds: float
    train_terms: dict[str, float]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FoldResult:
    plan: FoldPlan
    params: dict[str, np.ndarray]  # parameters of the selected epoch
    best_epoch: int
    history: list[EpochRecord]
    norm_stats: NormStats
    test_norm_stats: NormStats
    label_stats: LabelStats

    @property
    def best_val(self) -> float:
        return min(r.val_objective for r in self.history)


def _inputs(batch) -> tuple[ModelInputs, np.ndarray]:
    return ModelInputs.from_batch(batch), batch.spans[:, 1] - batch.spans[:, 0]


def validation_objective(
    params: dict[str, np.ndarray],
    config: TrainConfig,
    windows: Sequence[ClipWindow],
    rng_seed: int,
) -> float:
    """Self-supervised objective at full curriculum weights, without the supervised term.

    Augmentation draws come from a fixed stream so values are comparable
    across epochs; modality dropout is off.
    """
    weights = config.weights.without_sup()
    leaves = parameters(params, requires_grad=False)
    rng = np.random.default_rng(rng_seed)
    total, n = 0.0, 0
    for lo in range(0, len(windows), config.batch_size):
        batch = collate(windows[lo:lo + config.batch_size])
        inputs, lengths = _inputs(batch)
        res = ctaf_objective(leaves, config.model, inputs, lengths, weights, config.augment, rng, dropout=False)
        total += res.breakdown.total * batch.size
        n += batch.size
    return total / max(n, 1)


def train_fold(
    plan: FoldPlan,
    config: TrainConfig,
    windows: Sequence[ClipWindow],
    loss_log: IO[str] | None = None,
    data: FoldData | None = None,
) -> FoldResult:
    """Optimise one fold and keep the epoch with the lowest validation objective."""
    data = prepare_fold(plan, windows, config.coverage_threshold) if data is None else data
    root = config.seed
    params = init_params(config.model, derive_seed(root, "init", plan.index))
    opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    n_batches = math.ceil(len(data.train) / config.batch_size)
    total_steps = config.epochs * n_batches
    val_seed = derive_seed(root, "validation", plan.index)
    labels_all = np.array([w.label if w.label is not None else (np.nan, np.nan) for w in data.train], dtype=float)
    writer = LossLog(loss_log) if loss_log is not None else None

    history: list[EpochRecord] = []
    best_params, best_epoch, best_val = None, 0, np.inf
    step = 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = derive_rng(root, "shuffle", plan.index, epoch).permutation(len(data.train))
        sums = dict.fromkeys(TERMS, 0.0)
        sums["total"] = 0.0
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            batch = collate([data.train[i] for i in idx])
            inputs, lengths = _inputs(batch)
            weights = schedule(step, total_steps, config.weights)
            rng = derive_rng(root, "step", plan.index, step)
            leaves = parameters(params)
            try:
                res = ctaf_objective(
                    leaves, config.model, inputs, lengths, weights, config.augment, rng,
                    labels_all[idx], batch.label_mask, data.label_stats,
                )
                if not np.isfinite(res.loss.data):
                    raise NumericError(f"loss is {res.loss.data}")
                grads = backward(res.loss, leaves)
                bad = [k for k, g in grads.items() if not np.isfinite(g).all()]
                if bad:
                    raise NumericError(f"non-finite gradient for {bad[:3]}")
            except NumericError as exc:
                raise TrainingDiverged(
                    f"fold {plan.index} ({plan.held_out}) diverged at epoch {epoch}, step {step}: {exc}"
                ) from exc
            opt.step(grads)
            if writer is not None:
                writer.write(epoch, step, res.breakdown)
            for k, v in res.breakdown.terms().items():
                sums[k] += v
            sums["total"] += res.breakdown.total
            step += 1
        if writer is not None:
            writer.flush()
        val = validation_objective(params, config, data.val, val_seed)
        if not np.isfinite(val):
            raise TrainingDiverged(f"fold {plan.index} validation objective is {val} at epoch {epoch}")
        means = {k: v / n_batches for k, v in sums.items()}
        history.append(EpochRecord(epoch, means.pop("total"), val, time.perf_counter() - t0, means))
        log.info("fold %d epoch %d train %.4f val %.4f", plan.index, epoch, history[-1].train_total, val)
        if val < best_val:
            best_val, best_epoch = val, epoch
            best_params = {k: v.copy() for k, v in params.items()}
    return FoldResult(plan, best_params, best_epoch, history, data.norm_stats, data.test_norm_stats, data.label_stats)


# --------------------------------------------------------------------------
# embedding


@dataclass
class Embeddings:
    """Per-window model outputs in input order. Token arrays keep padding plus masks."""

    subjects: list[str]
    clip_ids: list[str]
    labels: np.ndarray  # (N, 2), NaN where unlabeled
    z_f: np.ndarray
    z_e: np.ndarray
    z_p: np.ndarray
    p_e: np.ndarray
    p_p: np.ndarray
    p_f: np.ndarray
    g: np.ndarray
    y_hat: np.ndarray
    tok_e: list[np.ndarray]  # (S_e, proj) per window, valid and masked rows
    tok_p: list[np.ndarray]
    t_e: list[np.ndarray]  # seconds from window start
    t_p: list[np.ndarray]
    m_e: list[np.ndarray]
    m_p: list[np.ndarray]
    align_e2p: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.subjects)


def check_params(params: dict[str, np.ndarray], cfg: ModelConfig) -> None:
    ref = init_params(cfg, 0)
    if set(ref) != set(params):
        extra, missing = sorted(set(params) - set(ref)), sorted(set(ref) - set(params))
        raise ValueError(f"checkpoint does not match architecture (extra {extra[:3]}, missing {missing[:3]})")
    for k, v in ref.items():
        if params[k].shape != v.shape:
            raise ValueError(f"checkpoint tensor {k} has shape {params[k].shape}, expected {v.shape}")


def embed_dataset(
    params: dict[str, np.ndarray],
    cfg: ModelConfig,
    windows: Sequence[ClipWindow],
    use_time: bool | None = None,
    batch_size: int = 64,
) -> Embeddings:
    """Deterministic forward pass over ``windows`` with frozen parameters."""
    check_params(params, cfg)
    if use_time is not None and use_time != cfg.use_time:
        raise ValueError(f"checkpoint trained with use_time={cfg.use_time}, asked for use_time={use_time}")
    leaves = parameters(params, requires_grad=False)
    cols: dict[str, list] = {k: [] for k in ("z_f", "z_e", "z_p", "p_e", "p_p", "p_f", "g", "y_hat")}
    tok = {k: [] for k in ("tok_e", "tok_p", "t_e", "t_p", "m_e", "m_p", "align_e2p")}
    labels = []
    for lo in range(0, len(windows), batch_size):
        batch = collate(windows[lo:lo + batch_size])
        inputs = ModelInputs.from_batch(batch)
        out = forward(leaves, cfg, inputs)
        for k in cols:
            cols[k].append(getattr(out, k).data)
        for i, w in enumerate(batch.windows):
            Se, Sp = w.eeg.n_tokens, w.phys.n_tokens
            tok["tok_e"].append(out.tok_e.data[i, :Se].copy())
            tok["tok_p"].append(out.tok_p.data[i, :Sp].copy())
            tok["t_e"].append(inputs.t_e[i, :Se].copy())
            tok["t_p"].append(inputs.t_p[i, :Sp].copy())
            tok["m_e"].append(inputs.m_e[i, :Se].copy())
            tok["m_p"].append(inputs.m_p[i, :Sp].copy())
            tok["align_e2p"].append(out.align.e2p[i, :Se, :Sp].copy())
        labels.append(batch.labels)
    return Embeddings(
        subjects=[w.subject for w in windows],
        clip_ids=[w.clip_id for w in windows],
        labels=np.concatenate(labels) if labels else np.zeros((0, 2)),
        **{k: np.concatenate(v) for k, v in cols.items()},
        **tok,
    )


__all__ = [
    "EpochRecord",
    "Embeddings",
    "FoldData",
    "FoldPlan",
    "FoldResult",
    "TrainConfig",
    "TrainingDiverged",
    "check_params",
    "embed_dataset",
    "loocv_splits",
    "prepare_fold",
    "train_fold",
    "validation_objective",
]
