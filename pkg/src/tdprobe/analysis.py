"""Measurement battery: correlations, block smoothing, linear CKA, SMACOF MDS, bottleneck decoding."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .store import ReportTable

VAR_TOL = 1e-12


class AnalysisError(ValueError):
    pass


# -- correlation -------------------------------------------------------------


def pearson(x, y) -> float | None:
    """Pearson r, or ``None`` when either input has (near) zero variance."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if len(x) != len(y):
        raise AnalysisError(f"length mismatch: {len(x)} vs {len(y)}")
    if len(x) < 3:
        raise AnalysisError("need at least 3 observations")
    dx = x - x.mean()
    dy = y - y.mean()
    vx = np.dot(dx, dx) / len(x)
    vy = np.dot(dy, dy) / len(y)
    if vx < VAR_TOL or vy < VAR_TOL:
        return None
    r = np.dot(dx, dy) / math.sqrt(np.dot(dx, dx) * np.dot(dy, dy))
    return float(min(1.0, max(-1.0, r)))


def _zscore_columns(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    A = np.asarray(A, dtype=float).reshape(len(A), -1)
    mu = A.mean(axis=0)
    var = A.var(axis=0)
    ok = var >= VAR_TOL
    Z = np.zeros_like(A)
    Z[:, ok] = (A[:, ok] - mu[ok]) / np.sqrt(var[ok])
    return Z, ok


def corr_matrix(latents: np.ndarray, signals: np.ndarray) -> np.ndarray:
    """``m x w`` Pearson matrix; NaN where a latent or a signal column is constant."""
    Zl, okl = _zscore_columns(latents)
    Zs, oks = _zscore_columns(signals)
    if len(Zl) != len(Zs):
        raise AnalysisError("latents and signals are not aligned")
    R = np.clip(Zl.T @ Zs / len(Zl), -1.0, 1.0)
    R[~okl, :] = np.nan
    R[:, ~oks] = np.nan
    return R


@dataclass
class MaxCorrResult:
    value: float
    per_run: list[float]
    per_column: list[np.ndarray]
    best_latents: list[np.ndarray]


def max_corr_protocol(latents: Sequence[np.ndarray], signals: Sequence[np.ndarray],
                      absolute: bool = False) -> MaxCorrResult:
    """Per signal column, the best correlation over non-constant latents; averaged over columns, then runs.

    ``latents`` and ``signals`` are per-run lists (a single matrix counts as one run).
    """
    if isinstance(latents, np.ndarray):
        latents, signals = [latents], [signals]
    if len(latents) != len(signals):
        raise AnalysisError("one signal matrix per run is required")
    per_run, per_col, best = [], [], []
    for L, S in zip(latents, signals):
        S = np.asarray(S, dtype=float).reshape(len(S), -1)
        if len(L) != len(S):
            raise AnalysisError("step counts differ between latents and signal")
        R = corr_matrix(L, S)
        valid_lat = ~np.isnan(R).all(axis=1)
        if not valid_lat.any():
            raise AnalysisError("no latent with non-zero variance")
        R = np.abs(R) if absolute else R
        cols = ~np.isnan(R[valid_lat]).all(axis=0)
        if not cols.any():
            continue
        Rv = np.where(np.isnan(R), -np.inf, R)
        col_max = Rv.max(axis=0)[cols]
        per_col.append(col_max)
        best.append(Rv.argmax(axis=0)[cols])
        per_run.append(float(col_max.mean()))
    if not per_run:
        raise AnalysisError("every signal column is constant")
    return MaxCorrResult(float(np.mean(per_run)), per_run, per_col, best)


def best_latent(latents: np.ndarray, signal: np.ndarray, absolute: bool = True) -> tuple[int, float]:
    """Index and r of the latent most correlated with a scalar signal."""
    R = corr_matrix(latents, np.asarray(signal).reshape(-1, 1))[:, 0]
    if np.isnan(R).all():
        raise AnalysisError("no latent with non-zero variance, or constant signal")
    key = np.where(np.isnan(R), -np.inf, np.abs(R) if absolute else R)
    j = int(np.argmax(key))
    return j, float(R[j])


def permutation_null(latents: np.ndarray, signal: np.ndarray, n_perm: int = 1000, seed: int = 0,
                     absolute: bool = True, chunk: int = 100) -> np.ndarray:
    """Max-over-latents correlation under random permutations of a scalar signal."""
    Zl, ok = _zscore_columns(latents)
    Zl = Zl[:, ok]
    s = np.asarray(signal, dtype=float).ravel()
    if len(s) != len(Zl):
        raise AnalysisError("latents and signal are not aligned")
    z = (s - s.mean()) / s.std()
    rng = np.random.default_rng(seed)
    out = np.empty(n_perm)
    for lo in range(0, n_perm, chunk):
        k = min(chunk, n_perm - lo)
        P = np.stack([z[rng.permutation(len(z))] for _ in range(k)], axis=1)
        R = Zl.T @ P / len(z)
        out[lo:lo + k] = (np.abs(R) if absolute else R).max(axis=0)
    return out


def null_bound(null: np.ndarray, level: float = 0.95) -> float:
    return float(np.quantile(null, level))


# -- block smoothing -------------------------------------------------------


def gaussian_kernel(sigma: float, truncate: float = 4.0) -> np.ndarray:
    radius = max(1, int(truncate * sigma + 0.5))
    off = np.arange(-radius, radius + 1)
    return np.exp(-(off**2) / (2.0 * sigma**2))


def smooth_blocks(values, sigma: float = 0.5, truncate: float = 4.0) -> np.ndarray:
    """Gaussian smoothing over the block index, renormalising the kernel at the edges."""
    v = np.asarray(values, dtype=float)
    if v.ndim != 1 or len(v) == 0:
        raise AnalysisError("need a non-empty 1-d sequence")
    if sigma <= 0:
        return v.copy()
    k = gaussian_kernel(sigma, truncate)
    radius = len(k) // 2
    out = np.empty_like(v)
    for i in range(len(v)):
        lo, hi = max(0, i - radius), min(len(v), i + radius + 1)
        w = k[lo - i + radius:hi - i + radius]
        out[i] = np.dot(w, v[lo:hi]) / w.sum()
    return out


# -- CKA -----------------------------------------------------------------


def cka(X: np.ndarray, Y: np.ndarray, center: bool = True) -> float:
    """Linear CKA ``||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F)`` on column-centred inputs."""
    X = np.asarray(X, dtype=float).reshape(len(X), -1)
    Y = np.asarray(Y, dtype=float).reshape(len(Y), -1)
    if len(X) != len(Y):
        raise AnalysisError("X and Y need the same number of rows")
    if center:
        X = X - X.mean(axis=0)
        Y = Y - Y.mean(axis=0)
    nx = np.linalg.norm(X.T @ X)
    ny = np.linalg.norm(Y.T @ Y)
    if nx == 0 or ny == 0:
        raise AnalysisError("zero matrix after centring")
    return float(np.linalg.norm(Y.T @ X) ** 2 / (nx * ny))


# -- MDS -------------------------------------------------------------------


@dataclass
class EmbeddingResult:
    coords: np.ndarray
    stress: float
    n_iterations: int
    stress_history: list[float] = field(default_factory=list)


def _check_dissimilarity(D: np.ndarray) -> np.ndarray:
    D = np.asarray(D, dtype=float)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise AnalysisError("dissimilarity must be a square matrix")
    if not np.isfinite(D).all():
        raise AnalysisError("dissimilarity has non-finite entries")
    if not np.allclose(D, D.T, atol=1e-12):
        raise AnalysisError("dissimilarity is not symmetric")
    if np.any(np.abs(np.diag(D)) > 1e-12):
        raise AnalysisError("dissimilarity diagonal is not zero")
    if np.any(D < 0):
        raise AnalysisError("dissimilarity has negative entries")
    return D


def _pdist(X: np.ndarray) -> np.ndarray:
    diff = X[:, None, :] - X[None, :, :]
    return np.sqrt(np.sum(diff**2, axis=-1))


def raw_stress(X: np.ndarray, D: np.ndarray) -> float:
    iu = np.triu_indices(len(D), 1)
    return float(np.sum((_pdist(X)[iu] - D[iu]) ** 2))


def mds(dissimilarity: np.ndarray, dims: int = 2, seed: int = 0, max_iter: int = 300, eps: float = 1e-9,
        method: str = "smacof") -> EmbeddingResult:
    """Metric MDS by SMACOF (Guttman transform) from a seeded random start.

    Stops when the stress decrease falls below ``eps`` times the current
    stress, or after ``max_iter`` iterations. ``method="classical"`` gives Torgerson scaling for cross-checks.
    """
    D = _check_dissimilarity(dissimilarity)
    n = len(D)
    if method == "classical":
        J = np.eye(n) - 1.0 / n
        B = -0.5 * J @ (D**2) @ J
        w, V = np.linalg.eigh(B)
        idx = np.argsort(w)[::-1][:dims]
        X = V[:, idx] * np.sqrt(np.maximum(w[idx], 0.0))
        return EmbeddingResult(X, raw_stress(X, D), 0, [raw_stress(X, D)])
    if method != "smacof":
        raise AnalysisError(f"unknown MDS method {method!r}")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, dims))
    history = [raw_stress(X, D)]
    it = 0
    for it in range(1, max_iter + 1):
        dist = _pdist(X)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(dist > 0, D / dist, 0.0)
        B = -ratio
        np.fill_diagonal(B, 0.0)
        np.fill_diagonal(B, -B.sum(axis=1))
        X = B @ X / n
        history.append(raw_stress(X, D))
        if history[-2] - history[-1] < eps * history[-2]:
            break
    return EmbeddingResult(X, history[-1], it, history)


def cosine_dissimilarity(rows: np.ndarray) -> np.ndarray:
    R = np.asarray(rows, dtype=float)
    norms = np.linalg.norm(R, axis=1)
    if np.any(norms == 0):
        raise AnalysisError(f"zero rows at {np.flatnonzero(norms == 0).tolist()}")
    U = R / norms[:, None]
    D = np.clip(1.0 - U @ U.T, 0.0, 2.0)
    D = 0.5 * (D + D.T)
    np.fill_diagonal(D, 0.0)
    return D


def last_encounter(states: Sequence[int], rows: np.ndarray, n_states: int | None = None) -> np.ndarray:
    """Row of each state's final occurrence, ordered by state id."""
    states = np.asarray(states)
    n_states = n_states or int(states.max()) + 1
    out = np.full((n_states, rows.shape[1]), np.nan)
    for t, s in enumerate(states):
        out[s] = rows[t]
    if np.isnan(out).any():
        missing = np.flatnonzero(np.isnan(out).any(axis=1)).tolist()
        raise AnalysisError(f"states never visited: {missing}")
    return out


def community_separation(coords: np.ndarray, community: np.ndarray) -> tuple[float, float]:
    """Mean embedded distance within and between communities."""
    dist = _pdist(coords)
    same = community[:, None] == community[None, :]
    off = ~np.eye(len(coords), dtype=bool)
    return float(dist[same & off].mean()), float(dist[~same].mean())


# -- bottleneck decoding ---------------------------------------------------


@dataclass
class LinearClassifier:
    """L2-regularised linear classifier trained by deterministic full-batch subgradient descent."""

    lam: float = 1e-3
    epochs: int = 200
    loss: str = "hinge"
    w: np.ndarray | None = None
    mu: np.ndarray | None = None
    sd: np.ndarray | None = None

    def _prep(self, X: np.ndarray) -> np.ndarray:
        Z = (X - self.mu) / self.sd
        return np.hstack([Z, np.ones((len(Z), 1))])

    def fit(self, X: np.ndarray, y: np.ndarray) -> "LinearClassifier":
        X = np.asarray(X, dtype=float)
        ys = np.where(np.asarray(y, dtype=bool), 1.0, -1.0)
        if len(np.unique(ys)) < 2:
            raise AnalysisError("training data contains a single class")
        self.mu = X.mean(axis=0)
        sd = X.std(axis=0)
        self.sd = np.where(sd > VAR_TOL, sd, 1.0)
        Z = self._prep(X)
        n = len(Z)
        w = np.zeros(Z.shape[1])
        for t in range(1, self.epochs + 1):
            eta = 1.0 / (self.lam * t)
            margin = ys * (Z @ w)
            if self.loss == "hinge":
                coef = (margin < 1.0).astype(float)
            elif self.loss == "logistic":
                coef = 1.0 / (1.0 + np.exp(np.clip(margin, -50, 50)))
            else:
                raise AnalysisError(f"unknown loss {self.loss!r}")
            grad = self.lam * w - (coef * ys) @ Z / n
            w = w - eta * grad
        self.w = w
        return self

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        return self._prep(np.asarray(X, dtype=float)) @ self.w

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.decision_function(X) > 0


@dataclass
class DecodeResult:
    accuracy: float
    fold_accuracies: list[float]
    n_test: int
    train_hashes: list[set] = field(default_factory=list)
    test_hashes: list[str] = field(default_factory=list)


def _hash(X: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(X, dtype=float).tobytes()).hexdigest()


def balanced_subsample(y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Indices with equal class counts (the larger class is subsampled)."""
    y = np.asarray(y, dtype=bool)
    pos, neg = np.flatnonzero(y), np.flatnonzero(~y)
    k = min(len(pos), len(neg))
    keep = np.concatenate([rng.choice(pos, k, replace=False), rng.choice(neg, k, replace=False)])
    return np.sort(keep)


def decode_bottleneck(features: Sequence[np.ndarray], labels: Sequence[np.ndarray], lam: float = 1e-3,
                      epochs: int = 200, loss: str = "hinge") -> DecodeResult:
    """Leave-one-run-out decoding of a binary label from per-run feature rows."""
    if len(features) < 2 or len(features) != len(labels):
        raise AnalysisError("need matching features/labels for at least two runs")
    run_hashes = [_hash(X) for X in features]
    accs, n_test = [], 0
    train_hashes, test_hashes = [], []
    correct = 0
    for k in range(len(features)):
        train_idx = [i for i in range(len(features)) if i != k]
        Xtr = np.vstack([features[i] for i in train_idx])
        ytr = np.concatenate([np.asarray(labels[i], dtype=bool) for i in train_idx])
        if ytr.all() or not ytr.any():
            raise AnalysisError(f"fold {k}: training data contains a single class")
        clf = LinearClassifier(lam, epochs, loss).fit(Xtr, ytr)
        pred = clf.predict(features[k])
        yk = np.asarray(labels[k], dtype=bool)
        accs.append(float(np.mean(pred == yk)))
        correct += int(np.sum(pred == yk))
        n_test += len(yk)
        train_hashes.append({run_hashes[i] for i in train_idx})
        test_hashes.append(run_hashes[k])
    return DecodeResult(correct / n_test, accs, n_test, train_hashes, test_hashes)


def binomial_band(n: int, p: float = 0.5, level: float = 0.95) -> tuple[float, float]:
    """Central interval of the binomial(n, p) proportion, from the exact CDF."""
    lo_tail = (1.0 - level) / 2.0
    pmf = np.array([math.comb(n, k) * p**k * (1 - p) ** (n - k) for k in range(n + 1)])
    cdf = np.cumsum(pmf)
    lo = int(np.searchsorted(cdf, lo_tail))
    hi = int(np.searchsorted(cdf, 1.0 - lo_tail))
    return lo / n, hi / n


# -- reports -------------------------------------------------------------


def correlation_report(latents_by_block: dict[int, np.ndarray], signals: dict[str, np.ndarray],
                       sigma: float = 0.5, n_perm: int = 1000, seed: int = 0) -> ReportTable:
    """Best latent per (block, signal) with permutation-null bound and block-smoothed curve."""
    table = ReportTable("correlations", [("block", "int"), ("signal", "string"), ("best_latent", "int"),
                                         ("r", "real"), ("abs_r", "real"), ("null_95", "real"),
                                         ("smoothed_abs_r", "real")])
    blocks = sorted(latents_by_block)
    for name in sorted(signals):
        sig = np.asarray(signals[name], dtype=float)
        rows = []
        for b in blocks:
            L = latents_by_block[b]
            if sig.ndim == 1 or sig.shape[1] == 1:
                j, r = best_latent(L, sig.ravel())
                null = permutation_null(L, sig.ravel(), n_perm, seed + b)
                rows.append([b, name, j, r, abs(r), null_bound(null)])
            else:
                res = max_corr_protocol(L, sig)
                rows.append([b, name, -1, res.value, abs(res.value), None])
        smoothed = smooth_blocks([r[4] for r in rows], sigma)
        for row, sm in zip(rows, smoothed):
            table.append(row + [float(sm)])
    return table
