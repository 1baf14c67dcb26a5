import math
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cyberposg import detector as det
from cyberposg.env import EnvConfig, burn_in_samples


def _expected_path(points, x, depth, limit):
    """Exact expected isolation depth of ``x`` in 1-D by integrating over split positions."""
    pts = sorted(points)
    if depth >= limit or len(pts) <= 1 or pts[0] == pts[-1]:
        return det.average_path_length(len(pts))
    lo, hi = pts[0], pts[-1]
    total = 0.0
    for i in range(len(pts) - 1):
        gap = pts[i + 1] - pts[i]
        if gap == 0:
            continue
        # split p in (pts[i], pts[i+1]] sends pts[:i+1] left (strict <)
        side = pts[: i + 1] if x <= pts[i] else pts[i + 1:]
        total += gap / (hi - lo) * _expected_path(side, x, depth + 1, limit)
    return 1.0 + total


def test_average_path_length_small_cases():
    assert det.average_path_length(1) == 0.0
    assert det.average_path_length(2) == 1.0
    # harmonic-number form: 2 H(n-1) - 2(n-1)/n, with H(n) ~ ln n + gamma
    n = 256
    exact = 2 * sum(1 / k for k in range(1, n)) - 2 * (n - 1) / n
    assert det.average_path_length(n) == pytest.approx(exact, abs=0.01)


def test_identical_samples_score_equal():
    f = det.fit(np.ones((64, 4)), n_trees=20, subsample=64, seed=0)
    s = f.score(np.ones((5, 4)))
    assert np.all(s == s[0])


def test_path_length_matches_exhaustive_oracle():
    rng = np.random.default_rng(3)
    inliers = rng.normal(0.0, 1.0, 7)
    points = list(inliers) + [inliers.mean() + 10.0]
    X = np.array(points)[:, None]
    f = det.fit(X, n_trees=4000, subsample=8, seed=11)
    limit = math.ceil(math.log2(8))
    got = f.path_lengths(X)
    want = np.array([_expected_path(points, x, 0, limit) for x in points])
    np.testing.assert_allclose(got, want, atol=0.08)
    scores = f.score(X)
    assert scores[-1] > scores[:-1].mean()


def test_far_outlier_scores_above_cluster():
    rng = np.random.default_rng(0)
    X = rng.normal(0, 1, (256, 4))
    f = det.fit(X, seed=1)
    assert f.score(np.full((1, 4), 10.0))[0] > f.score(X).mean()


def test_single_node_tree_scores_one():
    f = det.fit(np.zeros((1, 4)), n_trees=3, subsample=1, seed=0)
    assert f.score(np.zeros((2, 4))).tolist() == [1.0, 1.0]


def test_same_seed_same_forest():
    X = np.random.default_rng(5).poisson(2.0, (200, 4)).astype(float)
    a, b = det.fit(X, seed=9), det.fit(X, seed=9)
    assert all(ta.feature == tb.feature and ta.threshold == tb.threshold for ta, tb in zip(a.trees, b.trees))
    np.testing.assert_array_equal(a.score(X), b.score(X))


def test_fit_needs_enough_samples():
    with pytest.raises(det.DetectorError):
        det.fit(np.zeros((10, 4)), subsample=64)


def test_untrained_forest_refuses_to_score():
    with pytest.raises(det.DetectorError):
        det.IsolationForest().score(np.zeros((1, 4)))


def test_score_bounds_on_random_samples():
    rng = np.random.default_rng(1)
    f = det.fit(rng.poisson(1.0, (500, 4)).astype(float), seed=2)
    s = f.score(rng.poisson(3.0, (10_000, 4)).astype(float) * rng.uniform(0, 5, (10_000, 1)))
    assert np.all(s > 0) and np.all(s <= 1)


def test_scan_threshold_extremes():
    X = np.random.default_rng(4).poisson(1.0, (128, 4)).astype(float)
    f = det.fit(X, seed=0)
    recent = {d: [det.TrafficSample(d, 0, *X[d])] for d in range(10)}
    assert not any(flag for flag, _ in det.scan(list(range(10)), recent, f, threshold=1.0).values())
    assert all(flag for flag, _ in det.scan(list(range(10)), recent, f, threshold=0.0).values())


def test_scan_quiet_device_never_alerts():
    f = det.fit(np.zeros((64, 4)) + np.arange(64)[:, None], seed=0)
    out = det.scan([3], {}, f, threshold=0.0)
    assert out == {3: (False, 0.0)}


@settings(max_examples=200)
@given(
    scores=st.lists(st.floats(0.0, 1.0), min_size=1, max_size=50),
    t1=st.floats(0.0, 1.0),
    t2=st.floats(0.0, 1.0),
)
def test_alert_set_antitone_in_threshold(scores, t1, t2):
    lo, hi = min(t1, t2), max(t1, t2)
    a_lo, a_hi = det.alerts(scores, lo), det.alerts(scores, hi)
    assert np.all(a_lo >= a_hi)


def test_roc_auc_against_rank_sum():
    from scipy.stats import mannwhitneyu

    rng = np.random.default_rng(2)
    pos, neg = rng.integers(0, 5, 40).astype(float), rng.integers(0, 4, 60).astype(float)
    u = mannwhitneyu(pos, neg).statistic
    assert det.roc_auc(pos, neg) == pytest.approx(u / (40 * 60))


@lru_cache(maxsize=None)
def _clean_fit(seed):
    cfg = EnvConfig()
    train = burn_in_samples(cfg, 100 + seed, cfg.detector.burn_in, cfg.detector.burn_in_samples)
    held = burn_in_samples(cfg, 1000 + seed, cfg.detector.burn_in, 300)
    return det.fit(train, seed=seed), held


def test_clean_false_positive_rate():
    theta = EnvConfig().detector.threshold
    rates = []
    for s in range(5):
        f, held = _clean_fit(s)
        rates.append(float(np.mean(f.score(held) > theta)))
    assert np.mean(rates) <= 0.15, rates


def test_exploit_burst_separates_from_clean():
    for s in range(5):
        f, held = _clean_fit(s)
        burst = det.inject_exploit_burst(held, np.random.default_rng(s))
        assert det.roc_auc(f.score(burst), f.score(held)) >= 0.9


def test_refit_keeps_hyperparameters():
    X = np.random.default_rng(0).poisson(1.0, (40, 4)).astype(float)
    f = det.fit(np.vstack([X, X]), n_trees=7, subsample=64, seed=0, threshold=0.7)
    g = det.refit(f, X, seed=1)
    assert (g.n_trees, g.threshold, g.subsample) == (7, 0.7, 40)
