"""Hidden-activation correlates of rhythm metrics.

Single-unit Pearson tests with Bonferroni correction, ElasticNet linear
correlates chosen by cross-validation, language maps with standard errors,
one-way ANOVA F-ratios and QDA in correlate space.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .rnn.model import LstmModel
from .rnn.train import final_outputs


class CorrelateError(ValueError):
    pass


# -- activations ---------------------------------------------------------------


@dataclass
class ActivationTable:
    values: np.ndarray  # (sentences, units)
    languages: list[str]
    ids: list[str] = field(default_factory=list)
    layer: int = 2

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if len(self.values) != len(self.languages):
            raise CorrelateError("one language tag per row required")
        if not np.all(np.isfinite(self.values)):
            raise CorrelateError("activation table has non-finite entries")


def collect_activations(model: LstmModel, segments, languages: Sequence[str], layer: int = 2,
                        seed: int = 0, ids=None, mode: str = "analysis") -> ActivationTable:
    """Final-step hidden state of ``layer`` for each sentence (dropout active by default)."""
    if layer not in (1, 2):
        raise CorrelateError("layer must be 1 or 2")
    rng = np.random.default_rng(seed)
    values = final_outputs(model, segments, mode=mode, rng=rng, layer=layer)
    return ActivationTable(values, list(languages), list(ids or []), layer)


# -- single-cell correlation ---------------------------------------------------------


@dataclass
class CellCorrelation:
    r: np.ndarray  # NaN for zero-variance units
    p: np.ndarray
    defined: np.ndarray
    n_tests: int
    alpha: float

    @property
    def threshold(self) -> float:
        return self.alpha / max(self.n_tests, 1)

    @property
    def significant(self) -> np.ndarray:
        return self.defined & (self.p < self.threshold)

    @property
    def p_adjusted(self) -> np.ndarray:
        return np.minimum(self.p * self.n_tests, 1.0)

    def best(self) -> int:
        return int(np.nanargmax(np.abs(self.r)))


def pearson_p_value(r, n: int):
    """Two-sided p-value of Pearson ``r`` from Student's t with n-2 dof."""
    r = np.clip(np.asarray(r, dtype=np.float64), -1.0, 1.0)
    dof = n - 2
    with np.errstate(divide="ignore"):
        t = r * np.sqrt(dof / np.maximum(1.0 - r * r, 0.0))
    return 2.0 * stats.t.sf(np.abs(t), dof)


def single_cell_correlation(table, metric, alpha: float = 0.05, n_metrics: int = 1,
                            extra_tests: int = 0) -> CellCorrelation:
    """Pearson ``r`` between each unit and one metric.

    The Bonferroni count is ``defined units x n_metrics + extra_tests``;
    pass ``n_metrics`` / ``extra_tests`` to pool across metrics or layers.
    """
    X = table.values if isinstance(table, ActivationTable) else np.asarray(table, dtype=np.float64)
    y = np.asarray(metric, dtype=np.float64)
    n = len(y)
    if n < 3:
        raise CorrelateError("need at least 3 sentences")
    if not np.all(np.isfinite(y)):
        raise CorrelateError("metric undefined for some sentences")
    Xc = X - X.mean(axis=0)
    yc = y - y.mean()
    sx = np.sqrt((Xc**2).sum(axis=0))
    sy = np.sqrt((yc**2).sum())
    defined = (sx > 1e-12 * max(1.0, np.abs(X).max())) & (sy > 0)
    r = np.full(X.shape[1], np.nan)
    r[defined] = (Xc[:, defined] * yc[:, None]).sum(axis=0) / (sx[defined] * sy)
    r = np.clip(r, -1.0, 1.0)
    p = np.full(X.shape[1], np.nan)
    p[defined] = pearson_p_value(r[defined], n)
    return CellCorrelation(r, p, defined, int(defined.sum()) * n_metrics + extra_tests, alpha)


# -- ElasticNet ------------------------------------------------------------------


def kkt_residual(X, y, w, alpha: float, r1: float) -> float:
    """Largest violation of the ElasticNet stationarity conditions.

    For the objective ``1/(2n)|y - Xw|^2 + alpha r1 |w|_1 + alpha (1-r1) |w|^2 / 2``.
    """
    n = len(y)
    grad = X.T @ (y - X @ w) / n - alpha * (1 - r1) * w
    lam = alpha * r1
    nz = w != 0
    res = np.zeros_like(w)
    res[nz] = np.abs(grad[nz] - lam * np.sign(w[nz]))
    res[~nz] = np.maximum(np.abs(grad[~nz]) - lam, 0.0)
    return float(res.max()) if len(res) else 0.0


def coordinate_descent(X, y, alpha: float, r1: float, w0=None, tol: float = 1e-10,
                       max_sweeps: int = 100000) -> tuple[np.ndarray, bool]:
    """Cyclic coordinate descent for the ElasticNet objective (no intercept).

    Works on the Gram matrix ``X^T X / n`` so a sweep costs O(p^2) regardless
    of n.  Every few sweeps the current support and signs are tried in an
    exact linear solve, which ends the slow linear tail on collinear data.
    Stops when the KKT residual drops below ``tol``.
    """
    n, p = X.shape
    w = np.zeros(p) if w0 is None else np.array(w0, dtype=np.float64)
    G = X.T @ X / n
    c = X.T @ y / n
    diag = np.diag(G).copy()
    lam1, lam2 = alpha * r1, alpha * (1 - r1)
    for sweep in range(max_sweeps):
        for j in range(p):
            if diag[j] == 0:
                continue
            rho = c[j] - G[j] @ w + diag[j] * w[j]
            w[j] = math.copysign(max(abs(rho) - lam1, 0.0), rho) / (diag[j] + lam2)
        if _gram_kkt(G, c, w, lam1, lam2) < tol:
            return w, True
        if sweep % 5 == 4:
            polished = _polish(G, c, w, lam1, lam2)
            if polished is not None and _gram_kkt(G, c, polished, lam1, lam2) < tol:
                return polished, True
    return w, False


def _polish(G, c, w, lam1, lam2):
    """Exact minimizer on the support of ``w`` assuming its signs hold, else None."""
    A = np.flatnonzero(w)
    if len(A) == 0:
        return None
    sign = np.sign(w[A])
    try:
        wa = np.linalg.solve(G[np.ix_(A, A)] + lam2 * np.eye(len(A)), c[A] - lam1 * sign)
    except np.linalg.LinAlgError:
        return None
    if np.any(np.sign(wa) != sign):
        return None
    out = np.zeros_like(w)
    out[A] = wa
    return out


def _gram_kkt(G, c, w, lam1, lam2) -> float:
    grad = c - G @ w - lam2 * w
    nz = w != 0
    res = np.where(nz, np.abs(grad - lam1 * np.sign(w)), np.maximum(np.abs(grad) - lam1, 0.0))
    return float(res.max()) if len(res) else 0.0


def alpha_max(X, y, r1: float) -> float:
    """Smallest alpha that zeroes every weight (r1 floored at 1e-3 for ridge-like mixes)."""
    n = len(y)
    return float(np.max(np.abs(X.T @ y)) / (n * max(r1, 1e-3)))


def cv_folds(n: int, k: int = 7, groups=None, seed: int = 0) -> np.ndarray:
    """Fold id per row.  Sizes differ by at most one; with ``groups`` each
    group is spread round-robin over the folds."""
    if k < 2 or k > n:
        raise CorrelateError(f"cannot make {k} folds from {n} rows")
    rng = np.random.default_rng(seed)
    jitter = rng.permutation(n)
    if groups is None:
        order = jitter
    else:
        keys = np.asarray([str(g) for g in groups])
        order = np.lexsort((jitter, keys))
    folds = np.empty(n, dtype=int)
    folds[order] = np.arange(n) % k
    return folds


@dataclass
class Standardization:
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: float
    y_scale: float

    def transform_x(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.x_mean) / self.x_scale


def standardize(X, y) -> tuple[np.ndarray, np.ndarray, Standardization]:
    """Center/unit-variance columns; center ``y`` and scale it to unit norm."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xm = X.mean(axis=0)
    xs = X.std(axis=0)
    xs = np.where(xs > 0, xs, 1.0)
    ym = float(y.mean())
    yn = float(np.linalg.norm(y - ym))
    ys = yn if yn > 0 else 1.0
    return (X - xm) / xs, (y - ym) / ys, Standardization(xm, xs, ym, ys)


@dataclass
class LinearCorrelate:
    """Linear map from hidden activations to one rhythm metric.

    ``weights``/``intercept`` act on standardized activations and predict the
    normalized metric; ``raw_weights``/``raw_intercept`` act on raw
    activations and predict the metric in its own units.
    """

    weights: np.ndarray
    intercept: float
    alpha: float
    r1: float
    metric: str = ""
    layer: int = 2
    standardization: Standardization | None = None
    cv_errors: np.ndarray | None = None
    alphas: np.ndarray | None = None
    converged: bool = True
    constant_target: bool = False

    @property
    def raw_weights(self) -> np.ndarray:
        s = self.standardization
        return self.weights * s.y_scale / s.x_scale

    @property
    def raw_intercept(self) -> float:
        s = self.standardization
        return s.y_mean + s.y_scale * (self.intercept - np.sum(self.weights * s.x_mean / s.x_scale))

    def predict(self, X) -> np.ndarray:
        """Prediction in the metric's own units."""
        return np.asarray(X, dtype=np.float64) @ self.raw_weights + self.raw_intercept

    def project(self, X) -> np.ndarray:
        """Score in the normalized (unit-norm target) space."""
        return self.standardization.transform_x(X) @ self.weights + self.intercept

    def to_json(self) -> str:
        s = self.standardization
        return json.dumps(
            {
                "metric": self.metric,
                "layer": self.layer,
                "alpha": self.alpha,
                "r1": self.r1,
                "intercept": self.intercept,
                "weights": self.weights.tolist(),
                "standardization": {
                    "x_mean": s.x_mean.tolist(),
                    "x_scale": s.x_scale.tolist(),
                    "y_mean": s.y_mean,
                    "y_scale": s.y_scale,
                },
                "converged": self.converged,
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "LinearCorrelate":
        d = json.loads(text)
        s = d["standardization"]
        std = Standardization(np.array(s["x_mean"]), np.array(s["x_scale"]), s["y_mean"], s["y_scale"])
        return cls(np.array(d["weights"]), d["intercept"], d["alpha"], d["r1"], d["metric"],
                   d["layer"], std, converged=d.get("converged", True))


def elastic_net_fit(X, y, r1: float = 0.2, folds: int = 7, alpha: float | None = None,
                    n_alphas: int = 50, groups=None, seed: int = 0, metric: str = "",
                    layer: int = 2, tol: float = 1e-10) -> LinearCorrelate:
    """Fit an ElasticNet correlate; alpha is chosen by k-fold CV unless given.

    The alpha grid has ``n_alphas`` log-spaced points from ``alpha_max`` down
    to ``alpha_max * 1e-4``.  Each fold re-standardizes on its training rows.
    """
    if not 0 <= r1 <= 1:
        raise CorrelateError("r1 must lie in [0, 1]")
    X = X.values if isinstance(X, ActivationTable) else np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    Xs, ys, std = standardize(X, y)
    if np.allclose(y, y[0]):
        return LinearCorrelate(np.zeros(X.shape[1]), 0.0, alpha or 0.0, r1, metric, layer,
                               std, constant_target=True)

    cv_err = alphas = None
    if alpha is None:
        amax = alpha_max(Xs, ys, r1)
        alphas = np.geomspace(amax, amax * 1e-4, n_alphas)
        fold_id = cv_folds(len(y), folds, groups, seed)
        cv_err = np.zeros(n_alphas)
        for f in range(folds):
            tr, va = fold_id != f, fold_id == f
            Xt, yt, s = standardize(X[tr], y[tr])
            Xv = s.transform_x(X[va])
            w = None
            for a_i, a in enumerate(alphas):
                w, _ = coordinate_descent(Xt, yt, a, r1, w0=w, tol=1e-7)
                pred = (Xv @ w) * s.y_scale + s.y_mean
                # errors measured on the full-data normalized scale
                cv_err[a_i] += np.sum(((pred - y[va]) / std.y_scale) ** 2)
        cv_err /= len(y)
        alpha = float(alphas[np.argmin(cv_err)])

    w, converged = coordinate_descent(Xs, ys, alpha, r1, tol=tol)
    return LinearCorrelate(w, 0.0, alpha, r1, metric, layer, std, cv_err, alphas, converged)


# -- maps ------------------------------------------------------------------------


@dataclass
class MapPoint:
    language: str
    n: int
    x_mean: float
    x_se: float
    y_mean: float
    y_se: float


def standard_error(values) -> float:
    """``sd / sqrt(n)`` with the population standard deviation."""
    v = np.asarray(values, dtype=np.float64)
    return float(np.std(v) / np.sqrt(len(v)))


def project_map(correlate_x: LinearCorrelate, correlate_y: LinearCorrelate, groups: dict[str, np.ndarray],
                space: str = "metric") -> list[MapPoint]:
    """Per-language mean and standard error of both correlate projections.

    ``space='metric'`` reports metric units, ``'normalized'`` the unit-norm
    fitting space.
    """
    out = []
    for lang, X in groups.items():
        X = np.asarray(X, dtype=np.float64)
        if len(X) == 0:
            raise CorrelateError(f"empty group for language {lang!r}")
        if space == "metric":
            px, py = correlate_x.predict(X), correlate_y.predict(X)
        else:
            px, py = correlate_x.project(X), correlate_y.project(X)
        out.append(MapPoint(lang, len(X), float(px.mean()), standard_error(px),
                            float(py.mean()), standard_error(py)))
    return out


def write_map_csv(path, points: Sequence[MapPoint], corpus_tag: str = ""):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["language", "x_mean", "x_se", "y_mean", "y_se", "corpus_tag"])
        for p in points:
            writer.writerow([p.language, repr(p.x_mean), repr(p.x_se), repr(p.y_mean), repr(p.y_se), corpus_tag])


# -- F-ratio ---------------------------------------------------------------------


@dataclass
class FResult:
    F: float
    df_between: int
    df_within: int
    p: float
    infinite: bool = False


def f_ratio(groups: Sequence) -> FResult:
    """One-way ANOVA of values grouped by language."""
    groups = [np.asarray(g, dtype=np.float64) for g in groups]
    k = len(groups)
    n = sum(len(g) for g in groups)
    if k < 2:
        raise CorrelateError("need at least two groups")
    if any(len(g) == 0 for g in groups):
        raise CorrelateError("empty group")
    df_b, df_w = k - 1, n - k
    if df_w < 2:
        raise CorrelateError("need at least two residual degrees of freedom")
    grand = np.concatenate(groups).mean()
    ss_b = sum(len(g) * (g.mean() - grand) ** 2 for g in groups)
    ss_w = sum(np.sum((g - g.mean()) ** 2) for g in groups)
    if ss_w == 0:
        return FResult(math.inf, df_b, df_w, 0.0, infinite=True)
    F = (ss_b / df_b) / (ss_w / df_w)
    return FResult(float(F), df_b, df_w, float(stats.f.sf(F, df_b, df_w)))


# -- QDA -------------------------------------------------------------------------


@dataclass
class QdaModel:
    classes: list
    means: np.ndarray  # (K, d)
    covariances: np.ndarray  # (K, d, d), ridge included
    priors: np.ndarray
    ridge: float = 1e-6

    def discriminants(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out = np.empty((len(X), len(self.classes)))
        for k in range(len(self.classes)):
            cov = self.covariances[k]
            chol = np.linalg.cholesky(cov)
            diff = np.linalg.solve(chol, (X - self.means[k]).T)
            logdet = 2.0 * np.sum(np.log(np.diag(chol)))
            out[:, k] = np.log(self.priors[k]) - 0.5 * logdet - 0.5 * np.sum(diff**2, axis=0)
        return out


def qda_fit(points, labels, ridge: float = 1e-6, priors: str = "empirical", min_points: int | None = None) -> QdaModel:
    """Per-class Gaussian fit with covariance ridge ``ridge * trace / d``."""
    X = np.asarray(points, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    labels = np.asarray(labels)
    d = X.shape[1]
    min_points = d + 2 if min_points is None else min_points
    classes = sorted(set(labels.tolist()), key=lambda c: (str(type(c)), c))
    means, covs, counts = [], [], []
    for c in classes:
        Xc = X[labels == c]
        if len(Xc) < min_points:
            raise CorrelateError(f"class {c!r} has {len(Xc)} points, need {min_points}")
        mu = Xc.mean(axis=0)
        cov = np.atleast_2d(np.cov(Xc, rowvar=False, bias=True))
        eps = ridge * np.trace(cov) / d
        if eps == 0:
            eps = ridge
        means.append(mu)
        covs.append(cov + eps * np.eye(d))
        counts.append(len(Xc))
    counts = np.array(counts, dtype=np.float64)
    if priors == "empirical":
        pri = counts / counts.sum()
    elif priors == "uniform":
        pri = np.full(len(classes), 1.0 / len(classes))
    else:
        raise CorrelateError(f"unknown prior option {priors!r}")
    return QdaModel(classes, np.array(means), np.array(covs), pri, ridge)


def qda_predict(model: QdaModel, points, k: int = 3):
    """Predicted class and the top-``k`` classes for each point."""
    g = model.discriminants(points)
    order = np.argsort(-g, axis=1, kind="stable")[:, :k]
    cls = np.array(model.classes, dtype=object)
    return cls[order[:, 0]], cls[order]


def qda_score(model: QdaModel, points, labels) -> tuple[float, float]:
    pred, top = qda_predict(model, points)
    labels = np.asarray(labels, dtype=object)
    return float(np.mean(pred == labels)), float(np.mean((top == labels[:, None]).any(axis=1)))
