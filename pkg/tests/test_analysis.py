import math

import numpy as np
import pytest

from tdprobe import analysis
from tdprobe.analysis import AnalysisError, cka, mds


def two_pass_pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def test_pearson_matches_two_pass_oracle(rng):
    for _ in range(20):
        x = rng.standard_normal(50).tolist()
        y = (0.5 * np.array(x) + rng.standard_normal(50)).tolist()
        assert analysis.pearson(x, y) == pytest.approx(two_pass_pearson(x, y), abs=1e-12)
    big = 1e8 + rng.standard_normal(100)
    assert analysis.pearson(big, big) == pytest.approx(1.0)


def test_pearson_degenerate_cases():
    assert analysis.pearson([1, 1, 1], [1, 2, 3]) is None
    with pytest.raises(AnalysisError):
        analysis.pearson([1, 2], [1, 2])
    with pytest.raises(AnalysisError):
        analysis.pearson([1, 2, 3], [1, 2])


def test_corr_matrix_nan_for_constant_columns(rng):
    L = rng.standard_normal((30, 3))
    L[:, 1] = 2.0
    s = L[:, 0] * 3 + 1
    R = analysis.corr_matrix(L, s.reshape(-1, 1))
    assert R[0, 0] == pytest.approx(1.0) and np.isnan(R[1, 0])
    assert analysis.best_latent(L, -s) == (0, pytest.approx(-1.0))


def test_max_corr_protocol_averages_columns_then_runs(rng):
    runs_L, runs_S = [], []
    for _ in range(2):
        L = rng.standard_normal((40, 4))
        runs_L.append(L)
        runs_S.append(np.stack([L[:, 0], -L[:, 1]], axis=1))
    res = analysis.max_corr_protocol(runs_L, runs_S)
    assert len(res.per_run) == 2
    assert res.value < 1.0
    assert analysis.max_corr_protocol(runs_L, runs_S, absolute=True).value == pytest.approx(1.0)


def test_permutation_null_bounds_true_correlation(rng):
    L = np.abs(rng.standard_normal((300, 20)))
    s = L[:, 3] + 0.1 * rng.standard_normal(300)
    null = analysis.permutation_null(L, s, n_perm=200, seed=0)
    assert null.shape == (200,) and abs(analysis.best_latent(L, s)[1]) > analysis.null_bound(null)
    assert np.array_equal(null, analysis.permutation_null(L, s, n_perm=200, seed=0))


def test_smoothing_kernel_and_edges():
    k = analysis.gaussian_kernel(0.5)
    assert len(k) == 5 and k[2] == 1.0
    center = k[2] / k.sum()
    assert center == pytest.approx(0.786571, abs=1e-6)
    v = np.zeros(7)
    v[3] = 1.0
    out = analysis.smooth_blocks(v, 0.5)
    assert out[3] == pytest.approx(center) and out.sum() == pytest.approx(1.0)
    assert np.allclose(analysis.smooth_blocks(np.full(5, 2.0), 1.3), 2.0)
    assert np.array_equal(analysis.smooth_blocks(v, 0), v)


def test_cka_properties(rng):
    X = rng.standard_normal((60, 5))
    Q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    Y = rng.standard_normal((60, 3))
    assert cka(X, X) == pytest.approx(1.0, abs=1e-10)
    assert cka(X @ Q, Y) == pytest.approx(cka(X, Y), abs=1e-9)
    assert cka(-3.0 * X, Y) == pytest.approx(cka(X, Y), abs=1e-9)
    assert 0.0 <= cka(X, Y) <= 1.0
    with pytest.raises(AnalysisError):
        cka(np.ones((5, 2)), X[:5])


def test_cka_against_kernel_form(rng):
    X = rng.standard_normal((25, 4))
    Y = rng.standard_normal((25, 6))
    H = np.eye(25) - 1 / 25
    K, L = H @ X @ X.T @ H, H @ Y @ Y.T @ H
    hsic = lambda A, B: np.trace(A @ B)  # noqa: E731
    assert cka(X, Y) == pytest.approx(hsic(K, L) / math.sqrt(hsic(K, K) * hsic(L, L)), rel=1e-10)


def test_mds_equilateral_triangle_and_pair():
    D = np.ones((3, 3)) - np.eye(3)
    res = mds(D, seed=0)
    d = [np.linalg.norm(res.coords[i] - res.coords[j]) for i, j in ((0, 1), (0, 2), (1, 2))]
    assert np.allclose(d, 1.0, atol=1e-4) and res.stress < 1e-7
    res2 = mds(np.array([[0.0, 2.0], [2.0, 0.0]]), seed=1)
    assert np.linalg.norm(res2.coords[0] - res2.coords[1]) == pytest.approx(2.0, abs=1e-6)


def test_mds_stress_non_increasing(rng):
    P = rng.standard_normal((12, 4))
    D = analysis._pdist(P)
    res = mds(D, seed=3)
    h = np.array(res.stress_history)
    assert (np.diff(h) <= 1e-12 * h[0]).all()
    cl = mds(D, method="classical")
    assert cl.coords.shape == (12, 2)


def test_mds_validates_input():
    with pytest.raises(AnalysisError):
        mds(np.array([[0.0, 1.0], [2.0, 0.0]]))
    with pytest.raises(AnalysisError):
        mds(np.array([[1.0, 1.0], [1.0, 0.0]]))
    with pytest.raises(AnalysisError):
        mds(np.zeros((2, 2)), method="tsne")


def test_cosine_dissimilarity_and_last_encounter():
    R = np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
    D = analysis.cosine_dissimilarity(R)
    assert D[0, 1] == pytest.approx(1.0) and D[0, 2] == pytest.approx(1 - 1 / math.sqrt(2))
    with pytest.raises(AnalysisError):
        analysis.cosine_dissimilarity(np.zeros((2, 2)))
    rows = np.arange(10.0).reshape(5, 2)
    out = analysis.last_encounter([0, 1, 0, 2, 1], rows, 3)
    assert np.array_equal(out, rows[[2, 4, 3]])
    with pytest.raises(AnalysisError):
        analysis.last_encounter([0, 0], rows[:2], 2)


def test_linear_classifier_separable(rng):
    X = np.vstack([rng.normal(-2, 1, (40, 3)), rng.normal(2, 1, (40, 3))])
    y = np.r_[np.zeros(40, bool), np.ones(40, bool)]
    clf = analysis.LinearClassifier().fit(X, y)
    assert (clf.predict(X) == y).mean() > 0.95
    with pytest.raises(AnalysisError):
        analysis.LinearClassifier().fit(X, np.ones(80, bool))


def test_decode_leave_one_run_out_has_no_leakage(rng):
    feats = [rng.standard_normal((10, 3)) + np.r_[np.zeros(5), 3 * np.ones(5)][:, None] for _ in range(4)]
    labels = [np.r_[np.zeros(5, bool), np.ones(5, bool)] for _ in range(4)]
    res = analysis.decode_bottleneck(feats, labels)
    assert res.accuracy > 0.9 and res.n_test == 40
    for train, test in zip(res.train_hashes, res.test_hashes):
        assert test not in train


def test_balanced_subsample(rng):
    y = np.r_[np.ones(3, bool), np.zeros(9, bool)]
    keep = analysis.balanced_subsample(y, rng)
    assert len(keep) == 6 and y[keep].sum() == 3


def test_binomial_band_matches_exact_cdf():
    lo, hi = analysis.binomial_band(100)
    assert (lo, hi) == (0.4, 0.6)
    n = 240
    lo, hi = analysis.binomial_band(n)
    cdf = lambda k: sum(math.comb(n, i) for i in range(k + 1)) / 2 ** n  # noqa: E731
    assert cdf(round(lo * n)) >= 0.025 > cdf(round(lo * n) - 1)
    assert cdf(round(hi * n)) >= 0.975 > cdf(round(hi * n) - 1)


def test_correlation_report_columns(rng):
    L = {0: rng.standard_normal((100, 5)), 1: rng.standard_normal((100, 5))}
    s = L[1][:, 2] + 0.01 * rng.standard_normal(100)
    t = analysis.correlation_report(L, {"td": s}, n_perm=50)
    rows = t.as_dicts()
    assert [r["block"] for r in rows] == [0, 1]
    assert rows[1]["best_latent"] == 2 and rows[1]["abs_r"] > rows[1]["null_95"]
