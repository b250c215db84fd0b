"""Language representations built from network outputs.

Per-language histograms over recordings, Hellinger and Bhattacharyya
dissimilarities, agglomerative clustering, SMACOF metric MDS and exact t-SNE.
"""
from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .rnn.model import LstmModel
from .rnn.train import final_outputs

BHATTACHARYYA_CLAMP = 1e-12
SUM_TOL = 1e-6


class RepresentationError(ValueError):
    pass


# -- histograms -------------------------------------------------------------


def histograms_from_outputs(outputs: np.ndarray) -> np.ndarray:
    """Row ``i`` is the histogram of language ``i`` over recordings.

    ``outputs`` is the (N, L) array of final-step probability vectors;
    ``omega[i, n] = outputs[n, i] / sum_k outputs[k, i]``.
    """
    outputs = np.asarray(outputs, dtype=np.float64)
    totals = outputs.sum(axis=0)
    return (outputs / totals).T


def collect_histograms(
    model: LstmModel,
    segments,
    seed: int = 0,
    repeats: int = 1,
    mode: str = "analysis",
) -> tuple[np.ndarray, np.ndarray]:
    """Histograms from a balanced segment set, keeping dropout active.

    Returns ``(omega, outputs)``; with ``repeats > 1`` the outputs of several
    dropout draws are averaged before the histograms are formed.
    """
    counts = Counter(s.language for s in segments)
    if len(set(counts.values())) > 1:
        raise RepresentationError(f"unbalanced segment set: {dict(sorted(counts.items()))}")
    rng = np.random.default_rng(seed)
    outputs = np.mean(
        [final_outputs(model, segments, mode=mode, rng=rng) for _ in range(repeats)], axis=0
    )
    return histograms_from_outputs(outputs), outputs


# -- dissimilarities ----------------------------------------------------------


def _check_distribution(p, name):
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise RepresentationError(f"{name} has negative entries")
    if abs(p.sum() - 1.0) > SUM_TOL:
        raise RepresentationError(f"{name} sums to {p.sum():.8g}, not 1")
    return p


def hellinger(p, q) -> float:
    """Euclidean distance between element-wise square roots (range [0, sqrt 2])."""
    p, q = _check_distribution(p, "p"), _check_distribution(q, "q")
    return float(np.linalg.norm(np.sqrt(p) - np.sqrt(q)))


def bhattacharyya(p, q, return_flag: bool = False):
    """``-ln sum sqrt(p q)``; the coefficient is clamped at 1e-12.

    With ``return_flag`` a second value tells whether the clamp was hit
    (disjoint or nearly disjoint supports).
    """
    p, q = _check_distribution(p, "p"), _check_distribution(q, "q")
    bc = float(np.sum(np.sqrt(p * q)))
    clamped = bc < BHATTACHARYYA_CLAMP
    d = max(-np.log(max(bc, BHATTACHARYYA_CLAMP)), 0.0)
    return (d, clamped) if return_flag else d


MEASURES = {"hellinger": hellinger, "bhattacharyya": bhattacharyya}


@dataclass
class DissimilarityMatrix:
    values: np.ndarray
    labels: list[str]
    measure: str = "bhattacharyya"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        validate_dissimilarity(self.values)

    def subset(self, labels: Sequence[str]) -> "DissimilarityMatrix":
        idx = [self.labels.index(l) for l in labels]
        return DissimilarityMatrix(self.values[np.ix_(idx, idx)], list(labels), self.measure)


def validate_dissimilarity(D: np.ndarray):
    D = np.asarray(D)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise RepresentationError("dissimilarity matrix must be square")
    if not np.all(np.isfinite(D)):
        raise RepresentationError("dissimilarity matrix has non-finite entries")
    if np.any(D < 0):
        raise RepresentationError("dissimilarity matrix has negative entries")
    if np.max(np.abs(D - D.T), initial=0.0) > 1e-12:
        raise RepresentationError("dissimilarity matrix is not symmetric")
    if np.any(np.diag(D) != 0):
        raise RepresentationError("dissimilarity matrix has a non-zero diagonal")


def dissimilarity_matrix(omega: np.ndarray, labels: Sequence[str], measure: str = "bhattacharyya") -> DissimilarityMatrix:
    try:
        fn = MEASURES[measure]
    except KeyError:
        raise RepresentationError(f"unknown measure {measure!r}") from None
    L = len(omega)
    D = np.zeros((L, L))
    for i in range(L):
        for j in range(i + 1, L):
            D[i, j] = D[j, i] = fn(omega[i], omega[j])
    return DissimilarityMatrix(D, list(labels), measure)


def write_dissimilarity_csv(path, D: DissimilarityMatrix):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([D.measure, *D.labels])
        for label, row in zip(D.labels, D.values):
            writer.writerow([label, *(repr(float(v)) for v in row)])


def read_dissimilarity_csv(path) -> DissimilarityMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    measure, labels = rows[0][0], rows[0][1:]
    values = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return DissimilarityMatrix(values, labels, measure)


# -- hierarchical clustering --------------------------------------------------

LINKAGES = ("complete", "average", "single")


@dataclass
class Node:
    """Dendrogram node; leaves carry ``leaf`` and height 0."""

    height: float = 0.0
    left: "Node | None" = None
    right: "Node | None" = None
    leaf: str | None = None
    size: int = 1

    def leaves(self) -> list[str]:
        if self.leaf is not None:
            return [self.leaf]
        return self.left.leaves() + self.right.leaves()

    def merges(self) -> list["Node"]:
        """Internal nodes in merge order (children before parents)."""
        if self.leaf is not None:
            return []
        return self.left.merges() + self.right.merges() + [self]

    def to_dict(self) -> dict:
        if self.leaf is not None:
            return {"leaf": self.leaf, "height": 0.0}
        return {"left": self.left.to_dict(), "right": self.right.to_dict(), "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Node":
        if "leaf" in d:
            return cls(leaf=d["leaf"])
        left, right = cls.from_dict(d["left"]), cls.from_dict(d["right"])
        return cls(d["height"], left, right, size=left.size + right.size)


@dataclass
class Dendrogram:
    root: Node
    linkage: str
    steps: list[tuple[int, int, float]] = field(default_factory=list)

    @property
    def heights(self) -> list[float]:
        return [h for _, _, h in self.steps]

    def to_json(self) -> str:
        return json.dumps({"linkage": self.linkage, "tree": self.root.to_dict()}, indent=1)


def hierarchical_cluster(D, labels: Sequence[str] | None = None, linkage: str = "complete") -> Dendrogram:
    """Agglomerative clustering with complete, average or single linkage.

    Ties in the closest pair go to the lowest (row, column) cluster ids.
    ``steps`` lists merges as (cluster a, cluster b, height) with SciPy's
    numbering: leaves 0..n-1, merged clusters n, n+1, ...
    """
    if isinstance(D, DissimilarityMatrix):
        labels = labels or D.labels
        D = D.values
    D = np.asarray(D, dtype=np.float64)
    validate_dissimilarity(D)
    if linkage not in LINKAGES:
        raise RepresentationError(f"unknown linkage {linkage!r}")
    n = len(D)
    labels = list(labels) if labels is not None else [str(i) for i in range(n)]
    nodes = {i: Node(leaf=labels[i]) for i in range(n)}
    dist = {(i, j): D[i, j] for i in range(n) for j in range(i + 1, n)}
    steps = []
    next_id = n
    while len(nodes) > 1:
        (a, b), h = min(dist.items(), key=lambda kv: (kv[1], kv[0]))
        na, nb = nodes.pop(a), nodes.pop(b)
        merged = Node(h, na, nb, size=na.size + nb.size)
        steps.append((a, b, h))
        new_dist = {}
        for c in nodes:
            da = dist[min(a, c), max(a, c)]
            db = dist[min(b, c), max(b, c)]
            if linkage == "complete":
                d = max(da, db)
            elif linkage == "single":
                d = min(da, db)
            else:
                d = (na.size * da + nb.size * db) / (na.size + nb.size)
            new_dist[c, next_id] = d
        dist = {k: v for k, v in dist.items() if a not in k and b not in k}
        dist.update(new_dist)
        nodes[next_id] = merged
        next_id += 1
    root = next(iter(nodes.values()))
    return Dendrogram(root, linkage, steps)


# -- metric MDS (SMACOF) ------------------------------------------------------


@dataclass
class MdsResult:
    coords: np.ndarray
    stress: float  # sqrt(raw stress / sum of squared dissimilarities)
    raw_stress_history: list[float]
    converged: bool
    n_iter: int


def _pairwise(X):
    diff = X[:, None, :] - X[None, :, :]
    return np.sqrt((diff**2).sum(-1))


def raw_stress(X, D) -> float:
    """Sum over pairs i < j of ``(d_ij(X) - D_ij)^2``."""
    return float(np.sum(np.triu(_pairwise(X) - D, 1) ** 2))


def smacof_single(D, init, max_iter: int = 500, tol: float = 1e-9) -> MdsResult:
    """Guttman-transform iterations from ``init`` until relative stress change < tol.

    Also stops once the normalized stress reaches round-off level (exact fit).
    """
    n = len(D)
    X = np.array(init, dtype=np.float64)
    denom = np.sum(np.triu(D, 1) ** 2)
    history = [raw_stress(X, D)]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        dX = _pairwise(X)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(dX > 0, D / dX, 0.0)
        Bm = -ratio
        np.fill_diagonal(Bm, 0.0)
        np.fill_diagonal(Bm, -Bm.sum(axis=1))
        X = Bm @ X / n
        history.append(raw_stress(X, D))
        prev, cur = history[-2], history[-1]
        if prev - cur <= tol * max(prev, 1e-300) or cur <= 1e-24 * denom:
            converged = True
            break
    stress = float(np.sqrt(history[-1] / denom)) if denom > 0 else 0.0
    return MdsResult(X, stress, history, converged, it)


def mds(D, dims: int = 2, seed: int = 0, n_init: int = 8, max_iter: int = 500, tol: float = 1e-9) -> MdsResult:
    """Metric MDS by SMACOF, best of ``n_init`` seeded random starts."""
    if isinstance(D, DissimilarityMatrix):
        D = D.values
    D = np.asarray(D, dtype=np.float64)
    validate_dissimilarity(D)
    rng = np.random.default_rng(seed)
    scale = np.sqrt(np.mean(D[np.triu_indices(len(D), 1)] ** 2)) if len(D) > 1 else 1.0
    best = None
    for _ in range(n_init):
        init = rng.normal(0.0, scale, (len(D), dims))
        res = smacof_single(D, init, max_iter, tol)
        if best is None or res.stress < best.stress:
            best = res
    return best


def procrustes_align(X, Y) -> np.ndarray:
    """Rotate/reflect and translate ``X`` onto ``Y`` (no scaling)."""
    Xc, Yc = X - X.mean(0), Y - Y.mean(0)
    U, _, Vt = np.linalg.svd(Xc.T @ Yc)
    return Xc @ (U @ Vt) + Y.mean(0)


# -- exact t-SNE ---------------------------------------------------------------


@dataclass
class TsneResult:
    embedding: np.ndarray
    kl: float
    betas: np.ndarray
    entropies: np.ndarray  # per-point conditional entropy (nats) after calibration


def _row_entropy(d_row, beta):
    p = np.exp(-(d_row - d_row.min()) * beta)
    s = p.sum()
    p /= s
    h = -np.sum(p[p > 0] * np.log(p[p > 0]))
    return h, p


def calibrate_affinities(X, perplexity: float, tol: float = 1e-6, max_tries: int = 200):
    """Per-point Gaussian bandwidths by bisection so that entropy = log(perplexity).

    Returns the conditional affinity matrix P (rows sum to 1), the precisions
    ``beta = 1/(2 sigma^2)`` and the achieved entropies.
    """
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    sq = np.sum(X * X, axis=1)
    D = np.maximum(sq[:, None] + sq[None, :] - 2 * X @ X.T, 0.0)
    target = np.log(perplexity)
    P = np.zeros((n, n))
    betas = np.ones(n)
    entropies = np.zeros(n)
    for i in range(n):
        d = np.delete(D[i], i)
        lo, hi = 0.0, np.inf
        beta = 1.0 / max(np.median(d), 1e-12)
        for _ in range(max_tries):
            h, p = _row_entropy(d, beta)
            if abs(h - target) < tol:
                break
            if h > target:
                lo = beta
                beta = beta * 2 if hi == np.inf else (beta + hi) / 2
            else:
                hi = beta
                beta = (beta + lo) / 2
        betas[i], entropies[i] = beta, h
        P[i, np.arange(n) != i] = p
    return P, betas, entropies


def tsne(
    X,
    perplexity: float = 30.0,
    seed: int = 0,
    dims: int = 2,
    n_iter: int = 1000,
    learning_rate: float = 200.0,
    exaggeration: float = 12.0,
    exaggeration_iters: int = 250,
) -> TsneResult:
    """Exact t-SNE with early exaggeration, momentum and per-coordinate gains."""
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    if perplexity < 2:
        raise RepresentationError("perplexity must be at least 2")
    if perplexity >= n - 1:
        raise RepresentationError(f"perplexity {perplexity} too large for {n} points")
    Pc, betas, entropies = calibrate_affinities(X, perplexity)
    P = (Pc + Pc.T) / (2 * n)
    P = np.maximum(P, 1e-12)

    rng = np.random.default_rng(seed)
    Y = rng.normal(0.0, 1e-4, (n, dims))
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    for it in range(n_iter):
        exag = exaggeration if it < exaggeration_iters else 1.0
        momentum = 0.5 if it < exaggeration_iters else 0.8
        sq = np.sum(Y * Y, axis=1)
        num = 1.0 / (1.0 + np.maximum(sq[:, None] + sq[None, :] - 2 * Y @ Y.T, 0.0))
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), 1e-12)
        W = (exag * P - Q) * num
        grad = 4.0 * (np.diag(W.sum(axis=1)) - W) @ Y
        same = np.sign(grad) == np.sign(update)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        gains = np.maximum(gains, 0.01)
        update = momentum * update - learning_rate * gains * grad
        Y = Y + update
        Y -= Y.mean(axis=0)
    sq = np.sum(Y * Y, axis=1)
    num = 1.0 / (1.0 + np.maximum(sq[:, None] + sq[None, :] - 2 * Y @ Y.T, 0.0))
    np.fill_diagonal(num, 0.0)
    Q = np.maximum(num / num.sum(), 1e-12)
    kl = float(np.sum(P * np.log(P / Q)))
    return TsneResult(Y, kl, betas, entropies)


def write_embedding_csv(path, ids: Sequence[str], languages: Sequence[str], coords: np.ndarray):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "language", "x", "y"])
        for i, lang, (x, y) in zip(ids, languages, coords[:, :2]):
            writer.writerow([i, lang, repr(float(x)), repr(float(y))])
