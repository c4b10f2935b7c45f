import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctaf.evaluation import (
    AlignmentReport,
    LinearProbe,
    accuracy,
    bootstrap_ci,
    chance_rate,
    confusion_matrix,
    cosine_margin,
    discrete_bins,
    macro_f1,
    paired_delta,
    retrieval_at_tau,
    retrieval_counts,
    tertile_bins,
    tertile_edges,
    three_bin_probe,
)


def _unit(rng, *shape):
    x = rng.normal(size=shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


# ---------------------------------------------------------------- cosine margin

def test_cosine_margin_examples():
    rng = np.random.default_rng(0)
    p = _unit(rng, 5, 4)
    assert cosine_margin(p, p).cos_pos == pytest.approx(1.0)
    e = np.eye(3)
    assert cosine_margin(e, e).cos_neg == 0.0
    a, b = _unit(rng, 3, 4), _unit(rng, 3, 4)
    cm = cosine_margin(a, b)
    assert cm.cos_pos == pytest.approx(np.mean([a[i] @ b[i] for i in range(3)]), abs=1e-15)
    assert cm.cos_neg == pytest.approx(np.mean([a[0] @ b[1], a[1] @ b[2], a[2] @ b[0]]), abs=1e-15)
    one = cosine_margin(a[:1], b[:1])
    assert not one.neg_defined and np.isnan(one.cos_neg)


# ---------------------------------------------------------------- retrieval

def test_single_target_at_same_time():
    rng = np.random.default_rng(1)
    q, k = _unit(rng, 3, 4), _unit(rng, 1, 4)
    t = np.array([1.0, 1.0, 1.0])
    for tau in (0.0, 0.5):
        assert retrieval_at_tau(q, k, t, np.array([1.0]), np.ones(3), np.ones(1), tau) == 1.0


def test_tau_covering_window_gives_full_rate():
    rng = np.random.default_rng(2)
    q, k = _unit(rng, 20, 4), _unit(rng, 20, 4)
    t = (np.arange(20) + 0.5) * 0.25
    assert retrieval_at_tau(q, k, t, t, np.ones(20), np.ones(20), 5.0) == 1.0


def _brute_force(S, t_q, t_t, m_q, m_t, tau):
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


@pytest.mark.parametrize("seed", range(25))
def test_retrieval_matches_brute_force_4x4(seed):
    rng = np.random.default_rng(seed)
    q, k = _unit(rng, 4, 3), _unit(rng, 4, 3)
    t_q, t_t = np.sort(rng.uniform(0, 5, 4)), np.sort(rng.uniform(0, 5, 4))
    m_q = (rng.random(4) > 0.2).astype(float)
    m_t = (rng.random(4) > 0.2).astype(float)
    m_t[rng.integers(4)] = 1
    for tau in (0.25, 0.5, 1.0, 2.0):
        c = retrieval_counts(q, k, t_q, t_t, m_q, m_t, tau)
        assert (c.hits, c.queries) == _brute_force(q @ k.T, t_q, t_t, m_q, m_t, tau)


def test_window_without_targets_is_excluded():
    rng = np.random.default_rng(3)
    tok = [_unit(rng, 3, 4), _unit(rng, 3, 4)]
    t = [np.array([0.5, 1.5, 2.5])] * 2
    c = retrieval_counts(tok, tok, t, t, [np.ones(3), np.ones(3)], [np.ones(3), np.zeros(3)], 1.0)
    assert c.excluded == 3 and c.queries == 3


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_retrieval_monotone_in_tau(seed):
    rng = np.random.default_rng(seed)
    W = 4
    tok_e = [_unit(rng, 8, 4) for _ in range(W)]
    tok_p = [_unit(rng, 8, 4) for _ in range(W)]
    t = [(np.arange(8) + 0.5) * 5 / 8] * W
    m = [np.maximum(rng.random(8) > 0.3, np.eye(8)[0]).astype(float) for _ in range(W)]
    rates = [retrieval_at_tau(tok_e, tok_p, t, t, m, m, tau, d) for d in ("e2p", "p2e")
             for tau in (0.25, 0.5, 1.0, 2.0)]
    assert rates[0:4] == sorted(rates[0:4]) and rates[4:8] == sorted(rates[4:8])


def test_chance_rate_examples():
    t = (np.arange(20) + 0.5) * 0.25
    ones = np.ones(20)
    assert chance_rate(t, t, ones, ones, 5.0) == 1.0
    assert chance_rate(t, t, ones, ones, 0.0) == pytest.approx(1 / 20)
    # interior query: 4 bins either side plus itself
    interior = np.sum(np.abs(t[10] - t) <= 1.0)
    assert interior == 9
    oracle = np.mean([np.sum(np.abs(ti - t) <= 1.0) / 20 for ti in t])
    assert chance_rate(t, t, ones, ones, 1.0) == pytest.approx(oracle, abs=1e-15)
    assert oracle == pytest.approx(0.4)


# ---------------------------------------------------------------- probe metrics

def test_worked_confusion_case():
    cm = np.array([[5, 0, 0], [0, 0, 5], [0, 0, 5]])
    assert accuracy(cm) == pytest.approx(10 / 15)
    assert macro_f1(cm) == pytest.approx((1 + 0 + 2 / 3) / 3, abs=1e-12)
    assert round(macro_f1(cm), 4) == 0.5556


def _f1_oracle(y_true, y_pred, K=3):
    scores = []
    for c in range(K):
        tp = sum(1 for a, b in zip(y_true, y_pred) if a == c and b == c)
        fp = sum(1 for a, b in zip(y_true, y_pred) if a != c and b == c)
        fn = sum(1 for a, b in zip(y_true, y_pred) if a == c and b != c)
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        scores.append(2 * p * r / (p + r) if p + r else 0.0)
    return sum(scores) / K


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=40))
def test_macro_f1_matches_oracle(pairs):
    yt, yp = zip(*pairs)
    cm = confusion_matrix(yt, yp)
    assert cm.sum() == len(pairs)
    assert macro_f1(cm) == pytest.approx(_f1_oracle(yt, yp), abs=1e-12)
    assert accuracy(cm) == pytest.approx(np.mean(np.array(yt) == np.array(yp)), abs=1e-15)


def test_trivial_probe_scores():
    y = np.array([0, 1, 2] * 4)
    cm = confusion_matrix(y, y)
    assert accuracy(cm) == 1.0 and macro_f1(cm) == 1.0
    assert accuracy(confusion_matrix(y, np.zeros_like(y))) == pytest.approx(1 / 3)


def test_bins():
    np.testing.assert_array_equal(discrete_bins([1, 2, 3, 4, 5]), [0, 0, 1, 2, 2])
    edges = tertile_edges(np.arange(1, 10, dtype=float))
    np.testing.assert_array_equal(tertile_bins([1.0, 4.0, 5.0, 9.0], edges), [0, 1, 1, 2])


def test_linear_probe_separable():
    rng = np.random.default_rng(4)
    centers = np.array([[3, 0], [0, 3], [-3, -3.0]])
    y = np.repeat([0, 1, 2], 30)
    X = centers[y] + rng.normal(scale=0.3, size=(90, 2))
    assert (LinearProbe().fit(X, y).predict(X) == y).all()


def test_probe_flags_missing_training_class():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(20, 3))
    y_tr = np.column_stack([np.where(X[:, 0] > 0, 5.0, 1.0), np.full(20, 3.0)])
    scores = three_bin_probe(X, y_tr, X, y_tr, mode="discrete")
    assert scores["arousal"].missing_train_classes == (1,)
    assert scores["valence"].missing_train_classes == (0, 2)


# ---------------------------------------------------------------- bootstrap

def _bootstrap_oracle(values, R, level, seed):
    rng = np.random.default_rng(seed)
    n = len(values)
    means = sorted(sum(values[i] for i in rng.integers(0, n, size=n)) / n for _ in range(R))

    def pct(q):
        pos = q * (R - 1)
        lo = int(np.floor(pos))
        hi = min(lo + 1, R - 1)
        return means[lo] + (pos - lo) * (means[hi] - means[lo])

    a = (1 - level) / 2
    return pct(a), pct(1 - a)


def test_bootstrap_matches_independent_percentile_oracle():
    vals = [0.12, 0.4, -0.05, 0.33, 0.21]
    ci = bootstrap_ci(vals, n_resamples=2000, seed=7)
    lo, hi = _bootstrap_oracle(vals, 2000, 0.95, 7)
    assert ci.lo == pytest.approx(lo, abs=1e-12) and ci.hi == pytest.approx(hi, abs=1e-12)
    assert ci.mean == pytest.approx(np.mean(vals))


def test_bootstrap_examples():
    ci = bootstrap_ci([0.3] * 6)
    assert ci.lo == ci.mean == ci.hi == pytest.approx(0.3)
    ci = bootstrap_ci([0.0, 1.0] * 20, seed=1)
    assert ci.mean == 0.5 and ci.lo < 0.5 < ci.hi
    one = bootstrap_ci([0.4])
    assert one.degenerate and one.lo == one.hi == 0.4
    assert bootstrap_ci([1.0, 2.0, 5.0], seed=3) == bootstrap_ci([1.0, 2.0, 5.0], seed=3)


# ---------------------------------------------------------------- paired deltas

def test_paired_delta_examples():
    a = {"S01": 0.2, "S02": 0.5, "S03": 0.1, "S04": 0.4}
    same = paired_delta(a, a, n_resamples=500)
    assert (same.deltas == 0).all()
    shifted = paired_delta({k: v + 0.1 for k, v in a.items()}, a, n_resamples=500)
    np.testing.assert_allclose(shifted.deltas, 0.1, atol=1e-15)
    assert shifted.q3 - shifted.q1 == pytest.approx(0.0, abs=1e-15)
    b = {"S01": 0.1, "S02": 0.6, "S03": 0.0, "S04": 0.1}
    d = paired_delta(a, b, n_resamples=500)
    np.testing.assert_allclose(d.deltas, [0.1, -0.1, 0.1, 0.3], atol=1e-15)
    assert d.ci.mean == pytest.approx(0.1) and d.median == pytest.approx(0.1) and d.n_positive == 3
    with pytest.raises(ValueError):
        paired_delta(a, {"S01": 0.0})


def test_alignment_report_macro_bounds():
    from ctaf.evaluation import SubjectAlignment
    rows = [SubjectAlignment(f"S0{i}", 10, 0.2 + 0.05 * i, 0.0, 0.5, 0.4, 0.3, 0.3) for i in range(1, 5)]
    rep = AlignmentReport.from_rows(rows[::-1], tau=1.0, n_resamples=500)
    assert rep.subjects == ["S01", "S02", "S03", "S04"]
    ci = rep.macro["cos_pos"]
    assert ci.lo <= ci.mean <= ci.hi
