"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is repeated in the terminal summary.
Criteria 6 and 7 train the full leave-one-subject-out pipeline on the default
synthetic dataset (about 16 minutes on one core). Set ``CTAF_FULL_RUN`` to a
directory holding ``run/`` and ``eval/`` from an earlier invocation of the
default pipeline to reuse it; it is only reused when its recorded code version
and config match the installed package.
"""

import csv
import json
import os
import time
from dataclasses import replace
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from ctaf.cli import EXIT_OK, code_version, main
from ctaf.config import RunConfig
from ctaf.datamodel import ModalSequence
from ctaf.evaluation import accuracy, bootstrap_ci, confusion_matrix, macro_f1, retrieval_counts
from ctaf.model import ModelConfig, ModelInputs, forward, init_params
from ctaf.numerics import Tensor, backward, grad_check, ops, parameters
from ctaf.numerics import checkpoint
from ctaf.objectives import (
    TERMS,
    AugmentConfig,
    LabelStats,
    LossWeights,
    alignment_targets,
    consistency_loss,
    ctaf_objective,
    fuse_loss,
    info_nce,
    soft_alignment_loss,
    supervised_loss,
    total_loss,
    view_contrast,
    vicreg,
)
from ctaf.synthgen import SynthConfig, generate_dataset
from ctaf.trainer import TrainConfig, embed_dataset, loocv_splits, prepare_fold, train_fold

from conftest import record_criterion

TINY = ModelConfig(d_model=8, n_layers=1, n_heads=2, ff_mult=2, proj_dim=8, n_freqs=2)


def _inputs(rng, B, S, p_drop=0.3, De=10, Dp=4):
    def stream(D):
        m = (rng.random((B, S)) >= p_drop).astype(float)
        m[np.arange(B), rng.integers(S, size=B)] = 1.0
        t = np.sort(rng.uniform(0, 5, size=(B, S)), axis=1)
        return rng.normal(size=(B, S, D)), t, m

    X_e, t_e, m_e = stream(De)
    X_p, t_p, m_p = stream(Dp)
    return ModelInputs(X_e, t_e, m_e, X_p, t_p, m_p)


def _read_tsv(path):
    with open(path) as f:
        return list(csv.DictReader(f, delimiter="\t"))


# ---------------------------------------------------------------- 1. gradients

def _term_functions(rng, B=4, S=6, d=8):
    """Each loss term as a function of freshly drawn leaf inputs."""
    t_e = np.sort(rng.uniform(0, 5, (B, S)), axis=1)
    t_p = np.sort(rng.uniform(0, 5, (B, S)), axis=1)
    m_e = (rng.random((B, S)) > 0.2).astype(float)
    m_p = (rng.random((B, S)) > 0.2).astype(float)
    m_e[:, 0] = m_p[:, 0] = 1
    labels = rng.uniform(1, 5, (B, 2))
    stats = LabelStats.fit(labels)
    n = ops.l2_normalize
    vals = {
        "a": rng.normal(size=(B, d)), "b": rng.normal(size=(B, d)),
        "c": rng.normal(size=(B, d)), "e": rng.normal(size=(B, d)),
        "small_a": 0.3 * rng.normal(size=(B, d)), "small_b": 0.3 * rng.normal(size=(B, d)),
        "tok_e": rng.normal(size=(B, S, d)), "tok_p": rng.normal(size=(B, S, d)),
        "y_hat": rng.normal(size=(B, 2)),
    }

    def view(P):
        v1 = SimpleNamespace(p_e=n(P["a"]), p_p=n(P["b"]))
        v2 = SimpleNamespace(p_e=n(P["c"]), p_p=n(P["e"]))
        return view_contrast(v1, v2, 0.1)

    fns = {
        "con": (("a", "b"), lambda P: info_nce(n(P["a"]), n(P["b"]), 0.1)),
        "align": (("tok_e", "tok_p"), lambda P: soft_alignment_loss(
            n(P["tok_e"]), n(P["tok_p"]), t_e, t_p, m_e, m_p, 1.0, 0.1)[0]),
        "fuse": (("a", "b", "c"), lambda P: fuse_loss(P["a"], P["b"], P["c"])),
        "inv": (("a", "b"), lambda P: vicreg(P["a"], P["b"])[0]),
        "var": (("small_a", "small_b"), lambda P: vicreg(P["small_a"], P["small_b"])[1]),
        "cov": (("a", "b"), lambda P: vicreg(P["a"], P["b"])[2]),
        "view": (("a", "b", "c", "e"), view),
        "cons": (("a", "b"), lambda P: consistency_loss(P["a"], P["b"])),
        "sup": (("y_hat",), lambda P: supervised_loss(P["y_hat"], labels, np.ones(B), stats)),
    }
    return vals, fns


def test_criterion_01_gradient_suite():
    t0 = time.perf_counter()
    worst, failures = 0.0, []
    seeds = range(10)
    for seed in seeds:
        rng = np.random.default_rng(seed)
        vals, fns = _term_functions(rng)
        assert set(fns) == set(TERMS)
        for term, (keys, fn) in fns.items():
            rep = grad_check(fn, {k: vals[k] for k in keys}, tol=1e-4)
            worst = max(worst, rep.max_error)
            if not rep.passed:
                failures.append(f"{term}@{seed}")

        inp = _inputs(rng, 4, 6)
        labels = rng.uniform(1, 5, (4, 2))
        stats = LabelStats.fit(labels)

        def full(P, inp=inp, labels=labels, stats=stats, seed=seed):
            return ctaf_objective(P, TINY, inp, np.full(4, 5.0), LossWeights(), AugmentConfig(),
                                  np.random.default_rng(seed), labels, np.ones(4), stats).loss

        rep = grad_check(full, init_params(TINY, seed), tol=1e-4, max_entries=2, seed=seed)
        worst = max(worst, rep.max_error)
        if not rep.passed:
            failures.append(f"L_CTAF@{seed}")
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 60
    record_criterion(1, ok, f"gradient suite: {len(TERMS)} terms + L_CTAF x {len(seeds)} seeds, "
                            f"max rel err {worst:.2e} (tol 1e-4), {elapsed:.1f}s (< 60s)"
                            + (f", failures {failures}" if failures else ""))
    assert ok


# ---------------------------------------------------------------- 2. masking

def test_criterion_02_masking_suite():
    worst_out, grads_zero = 0.0, True
    for cfg in (TINY, ModelConfig()):
        for seed in range(5):
            rng = np.random.default_rng(100 + seed)
            inp = _inputs(rng, 3, 8, p_drop=0.4)
            leaves = parameters(init_params(cfg, seed), requires_grad=False)
            a = forward(leaves, cfg, inp)
            noisy = inp.replace(
                X_e=inp.X_e + 1e3 * rng.normal(size=inp.X_e.shape) * (1 - inp.m_e)[..., None],
                X_p=inp.X_p + 1e3 * rng.normal(size=inp.X_p.shape) * (1 - inp.m_p)[..., None],
            )
            b = forward(leaves, cfg, noisy)
            for name in a.TENSOR_FIELDS:
                worst_out = max(worst_out, float(np.abs(getattr(a, name).data - getattr(b, name).data).max()))
            for k in ("e2p", "p2e"):
                worst_out = max(worst_out, float(np.abs(getattr(a.align, k) - getattr(b.align, k)).max()))

            X_e, X_p = Tensor(inp.X_e, requires_grad=True), Tensor(inp.X_p, requires_grad=True)
            out = forward(leaves, cfg, inp.replace(X_e=X_e, X_p=X_p))
            loss = ops.add(ops.add(ops.sum(ops.square(out.z_f)), ops.sum(out.tok_e)),
                           ops.add(ops.sum(out.tok_p), ops.sum(out.y_hat)))
            g = backward(loss, {"X_e": X_e, "X_p": X_p})
            grads_zero &= bool((g["X_e"][inp.m_e == 0] == 0).all() and (g["X_p"][inp.m_p == 0] == 0).all())
    ok = worst_out <= 1e-9 and grads_zero
    record_criterion(2, ok, f"masking: max output change under 1e3 masked noise {worst_out:.1e} (<= 1e-9), "
                            f"masked-input gradients exactly zero: {grads_zero}")
    assert ok


# ---------------------------------------------------------------- 3. permutation

def test_criterion_03_joint_permutation():
    cfg = replace(ModelConfig(), conv_kernel=1)
    rng = np.random.default_rng(7)
    inp = _inputs(rng, 3, 10)
    leaves = parameters(init_params(cfg, 1), requires_grad=False)
    ref = forward(leaves, cfg, inp).z_f.data
    worst = 0.0
    for _ in range(100):
        p = rng.permutation(10)
        perm = ModelInputs(inp.X_e[:, p], inp.t_e[:, p], inp.m_e[:, p], inp.X_p[:, p], inp.t_p[:, p], inp.m_p[:, p])
        worst = max(worst, float(np.abs(forward(leaves, cfg, perm).z_f.data - ref).max()))
    ok = worst <= 1e-9
    record_criterion(3, ok, f"joint permutation (k=1, 100 perms): max |dz_f| {worst:.1e} (<= 1e-9)")
    assert ok


# ---------------------------------------------------------------- 4. alignment targets

def _targets_oracle(t_e, t_p, m_e, m_p, sigma):
    B, Se = t_e.shape
    W = np.zeros((B, Se, t_p.shape[1]))
    for b in range(B):
        for i in range(Se):
            if not m_e[b, i]:
                continue
            valid = [j for j in range(t_p.shape[1]) if m_p[b, j]]
            logits = {j: -((t_e[b, i] - t_p[b, j]) ** 2) / (2 * sigma ** 2) for j in valid}
            top = max(logits.values())
            z = sum(np.exp(v - top) for v in logits.values())
            for j in valid:
                W[b, i, j] = np.exp(logits[j] - top) / z
    return W


def test_criterion_04_alignment_target_oracle():
    worst, one_hot = 0.0, True
    for seed in range(20):
        rng = np.random.default_rng(seed)
        t_e, t_p = rng.uniform(0, 5, (3, 7)), rng.uniform(0, 5, (3, 6))
        m_e = (rng.random((3, 7)) > 0.3).astype(float)
        m_p = (rng.random((3, 6)) > 0.3).astype(float)
        m_p[:, 0] = 1
        for sigma in (0.25, 1.0, 3.0):
            W = alignment_targets(t_e, t_p, m_e, m_p, sigma)
            worst = max(worst, float(np.abs(W - _targets_oracle(t_e, t_p, m_e, m_p, sigma)).max()))
        # keys on a 0.1 s grid, queries off-grid by under 0.03 s: nearest deltas are distinct by >= 0.04 s
        t_p = np.stack([np.sort(rng.choice(50, 6, replace=False)) * 0.1 for _ in range(3)])
        t_e = rng.integers(0, 50, (3, 7)) * 0.1 + rng.uniform(-0.03, 0.03, (3, 7))
        W = alignment_targets(t_e, t_p, np.ones_like(t_e), np.ones_like(t_p), 1e-3)
        nearest = np.abs(t_e[:, :, None] - t_p[:, None, :]).argmin(axis=2)
        one_hot &= bool(np.allclose(W, np.eye(6)[nearest], rtol=0, atol=1e-12))
    ok = worst <= 1e-12 and one_hot
    record_criterion(4, ok, f"alignment targets: max |W - oracle| {worst:.1e} (<= 1e-12), "
                            f"one-hot at sigma=1e-3: {one_hot}")
    assert ok


# ---------------------------------------------------------------- 5. loss oracles

def test_criterion_05_loss_oracles():
    I = np.eye(2)
    nce = float(info_nce(I, I, 1.0).data)
    closed = np.log1p(np.exp(-1.0))
    nce_ok = abs(nce - closed) <= 1e-6 and abs(nce - 0.3133) <= 5e-5

    rng = np.random.default_rng(0)
    x = rng.normal(size=(16, 5))
    x = (x - x.mean(0)) / x.std(0, ddof=1)
    _, var, _ = vicreg(x, x)
    H = np.array([[1, 1, 1, 1], [1, -1, 1, -1], [1, 1, -1, -1], [1, -1, -1, 1]], float)
    diag_cov = H[:, 1:] * np.array([0.5, 2.0, 3.0])  # centred, mutually orthogonal columns
    _, _, cov = vicreg(diag_cov, diag_cov)
    vc_ok = float(var.data) == 0.0 and abs(float(cov.data)) <= 1e-15

    terms = {k: Tensor(np.array(v)) for k, v in zip(TERMS, rng.uniform(0.1, 3.0, len(TERMS)))}
    base = LossWeights()
    L0 = float(total_loss(terms, base)[0].data)
    worst = 0.0
    for k in TERMS:
        if k == "con":
            continue
        name = {"align": "beta", "fuse": "alpha_f"}.get(k, f"lam_{k}")
        w1 = replace(base, **{name: getattr(base, name) + 1.0})
        worst = max(worst, abs(float(total_loss(terms, w1)[0].data) - L0 - float(terms[k].data)))
    lin_ok = worst <= 1e-10
    ok = nce_ok and vc_ok and lin_ok
    record_criterion(5, ok, f"loss oracles: info_nce {nce:.6f} vs {closed:.6f}, var {float(var.data):.1e}, "
                            f"cov {float(cov.data):.1e}, weight linearity err {worst:.1e} (<= 1e-10)")
    assert ok


# ---------------------------------------------------------------- 6 and 7. full pipeline

def _reusable(root: Path) -> bool:
    try:
        m = json.loads((root / "run" / "manifest.json").read_text())
        e = json.loads((root / "eval" / "manifest.json").read_text())
    except FileNotFoundError:
        return False
    return (m["code_version"] == e["code_version"] == code_version()
            and m["config"] == json.loads(json.dumps(RunConfig().to_dict(), default=list))
            and m["options"]["ablate_time"])


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    env = os.environ.get("CTAF_FULL_RUN")
    if env and _reusable(Path(env)):
        return Path(env)
    root = tmp_path_factory.mktemp("full")
    assert main(["synth", "--out", str(root / "data")]) == EXIT_OK
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "run"), "--ablate-time"]) == EXIT_OK
    assert main(["eval", "--run", str(root / "run"), "--out", str(root / "eval")]) == EXIT_OK
    return root


def test_criterion_06_synthetic_end_to_end(full_run):
    timing = json.loads((full_run / "run" / "timing.json").read_text())
    with_time_s = sum(v for k, v in timing["folds"].items() if k.startswith("with_time/"))
    both_s = timing["total_seconds"]

    def table(variant):
        return {r["subject"]: {k: float(v) for k, v in r.items() if k != "subject"}
                for r in _read_tsv(full_run / "eval" / f"alignment_{variant}.tsv")}

    w, n = table("with_time"), table("no_time")
    macro = w.pop("MACRO")
    n.pop("MACRO")
    margin = macro["cos_pos"] - macro["cos_neg"]
    ratio_e2p = macro["retr_e2p"] / macro["chance_e2p"]
    ratio_p2e = macro["retr_p2e"] / macro["chance_p2e"]
    wins = sum(1 for s in w if w[s]["cos_pos"] > n[s]["cos_pos"] and w[s]["retr_e2p"] > n[s]["retr_e2p"])

    a = margin >= 0.15
    b = ratio_e2p >= 1.5 and ratio_p2e >= 1.5
    c = wins >= 6
    t = both_s <= 1800
    ok = a and b and c and t
    record_criterion(6, ok, f"synthetic LOOCV ({len(w)} subjects): (a) cos margin {margin:.3f} (>= 0.15) "
                            f"{'ok' if a else 'no'}; (b) retr@1s/chance e2p {ratio_e2p:.2f} p2e {ratio_p2e:.2f} "
                            f"(>= 1.5) {'ok' if b else 'no'}; (c) with-time wins {wins}/{len(w)} (>= 6) "
                            f"{'ok' if c else 'no'}; training {with_time_s / 60:.1f} min with time, "
                            f"{both_s / 60:.1f} min both variants (<= 30) {'ok' if t else 'no'}")
    assert ok


def test_criterion_07_retrieval_monotone_in_tau(full_run):
    rows = _read_tsv(full_run / "eval" / "tau_sweep.tsv")
    curves: dict = {}
    for r in rows:
        for d in ("retr_e2p", "retr_p2e"):
            curves.setdefault((r["variant"], r["subject"], d), []).append((float(r["tau"]), float(r[d])))
    bad = []
    for key, pts in curves.items():
        pts.sort()
        vals = [v for _, v in pts]
        if any(b < a for a, b in zip(vals, vals[1:])):
            bad.append(key)
    taus = sorted({t for pts in curves.values() for t, _ in pts})
    ok = not bad and taus == [0.25, 0.5, 1.0, 2.0]
    record_criterion(7, ok, f"retrieval non-decreasing over tau {taus} on {len(curves)} fold/direction curves"
                            + (f", violations {bad}" if bad else ""))
    assert ok


# ---------------------------------------------------------------- 8. metric oracles

def _argmax_brute(S, t_q, t_t, m_q, m_t, tau):
    hits = n = 0
    for i in range(S.shape[0]):
        if not m_q[i]:
            continue
        n += 1
        best, best_j = -np.inf, None
        for j in range(S.shape[1]):
            if m_t[j] and S[i, j] > best:
                best, best_j = S[i, j], j
        hits += abs(t_q[i] - t_t[best_j]) <= tau
    return hits, n


def _f1_oracle(y_true, y_pred):
    f = []
    for c in range(3):
        tp = sum(a == c and b == c for a, b in zip(y_true, y_pred))
        fp = sum(a != c and b == c for a, b in zip(y_true, y_pred))
        fn = sum(a == c and b != c for a, b in zip(y_true, y_pred))
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f.append(2 * p * r / (p + r) if p + r else 0.0)
    return sum(f) / 3


def _percentile_oracle(values, R, seed, level=0.95):
    rng = np.random.default_rng(seed)
    n = len(values)
    means = sorted(sum(values[i] for i in rng.integers(0, n, size=n)) / n for _ in range(R))

    def pct(q):
        pos = q * (R - 1)
        lo = int(pos)
        hi = min(lo + 1, R - 1)
        return means[lo] + (pos - lo) * (means[hi] - means[lo])

    return pct((1 - level) / 2), pct(1 - (1 - level) / 2)


def test_criterion_08_metric_oracles():
    retr_ok = True
    for seed in range(200):
        rng = np.random.default_rng(seed)
        q, k = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        t_q, t_t = rng.uniform(0, 5, 4), rng.uniform(0, 5, 4)
        m_q, m_t = (rng.random(4) > 0.2).astype(float), (rng.random(4) > 0.2).astype(float)
        m_t[0] = 1
        tau = [0.25, 0.5, 1.0, 2.0][seed % 4]
        c = retrieval_counts(q, k, t_q, t_t, m_q, m_t, tau)
        retr_ok &= (c.hits, c.queries) == _argmax_brute(q @ k.T, t_q, t_t, m_q, m_t, tau)

    cm = np.array([[5, 0, 0], [0, 0, 5], [0, 0, 5]])
    worked = abs(accuracy(cm) - 10 / 15) <= 1e-12 and round(macro_f1(cm), 4) == 0.5556
    f1_err = 0.0
    for seed in range(200):
        rng = np.random.default_rng(seed)
        yt, yp = rng.integers(0, 3, 25), rng.integers(0, 3, 25)
        f1_err = max(f1_err, abs(macro_f1(confusion_matrix(yt, yp)) - _f1_oracle(yt, yp)))

    boot_err = 0.0
    for seed in range(5):
        vals = list(np.random.default_rng(seed).normal(size=8))
        ci = bootstrap_ci(vals, n_resamples=2000, seed=seed)
        lo, hi = _percentile_oracle(vals, 2000, seed)
        boot_err = max(boot_err, abs(ci.lo - lo), abs(ci.hi - hi))
    ok = retr_ok and worked and f1_err <= 1e-12 and boot_err <= 1e-12
    record_criterion(8, ok, f"metric oracles: retrieval == brute force on 200 4x4 cases: {retr_ok}; "
                            f"worked case acc {accuracy(cm):.4f} F1 {macro_f1(cm):.4f}; "
                            f"F1 err {f1_err:.1e}; bootstrap err {boot_err:.1e}")
    assert ok


# ---------------------------------------------------------------- 9. leakage

def test_criterion_09_leakage_audit():
    windows, _ = generate_dataset(SynthConfig(n_subjects=3, clips_per_subject=8, n_bins=6))
    plan = loocv_splits([w.subject for w in windows])[0]
    rng = np.random.default_rng(0)

    def mutate(w):
        def seq(s):
            return ModalSequence(s.X * 3.0 + rng.normal(scale=5.0, size=s.X.shape), s.t, s.m, s.empty)
        return replace(w, eeg=seq(w.eeg), phys=seq(w.phys), label=(5.0, 1.0))

    mutated = [mutate(w) if w.subject == plan.held_out else w for w in windows]
    cfg = TrainConfig(epochs=2, batch_size=8, model=TINY)
    a, b = prepare_fold(plan, windows), prepare_fold(plan, mutated)
    norm_same = a.norm_stats.to_dict() == b.norm_stats.to_dict()
    label_same = a.label_stats.to_dict() == b.label_stats.to_dict()
    ra, rb = train_fold(plan, cfg, windows), train_fold(plan, cfg, mutated)
    ckpt_same = checkpoint.dumps(ra.params) == checkpoint.dumps(rb.params) and ra.best_epoch == rb.best_epoch
    eval_differs = not np.array_equal(embed_dataset(ra.params, TINY, a.test).z_f,
                                      embed_dataset(rb.params, TINY, b.test).z_f)
    ok = norm_same and label_same and ckpt_same and eval_differs
    record_criterion(9, ok, f"leakage audit (held out {plan.held_out}): NormStats unchanged {norm_same}, "
                            f"LabelStats unchanged {label_same}, checkpoint byte-identical {ckpt_same}, "
                            f"held-out embeddings changed {eval_differs}")
    assert ok


# ---------------------------------------------------------------- 10. reproducibility

SMOKE = """
seed = 11
[synth]
n_subjects = 3
clips_per_subject = 8
n_bins = 8
[train]
epochs = 2
batch_size = 8
[model]
d_model = 8
n_layers = 1
n_heads = 2
ff_mult = 2
proj_dim = 8
n_freqs = 2
[eval]
n_resamples = 200
probe_steps = 50
"""


def test_criterion_10_reproducible_from_manifest(tmp_path):
    cfg = tmp_path / "smoke.toml"
    cfg.write_text(SMOKE)
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "data")]) == EXIT_OK
    for tag, src in (("a", ["--config", str(cfg), "--data", str(tmp_path / "data")]),
                     ("b", ["--from-manifest", str(tmp_path / "a" / "run")])):
        assert main(["train", *src, "--out", str(tmp_path / tag / "run"), "--ablate-time"]) == EXIT_OK
        assert main(["eval", "--run", str(tmp_path / tag / "run"), "--out", str(tmp_path / tag / "eval")]) == EXIT_OK
        assert main(["report", "--eval", str(tmp_path / tag / "eval")]) == EXIT_OK
    compared, differ = 0, []
    for sub, pattern in (("run", "**/history.tsv"), ("eval", "*.tsv"), ("eval", "*.csv"), ("eval", "report.md")):
        for f in sorted((tmp_path / "a" / sub).glob(pattern)):
            rel = f.relative_to(tmp_path / "a")
            compared += 1
            if f.read_bytes() != (tmp_path / "b" / rel).read_bytes():
                differ.append(str(rel))
    ok = compared > 0 and not differ
    record_criterion(10, ok, f"rerun from manifest: {compared} history logs and report tables compared, "
                             f"{len(differ)} differ" + (f" {differ}" if differ else ""))
    assert ok
