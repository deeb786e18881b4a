"""Linear and nonlinear 2-D projection of embedding sets.

PCA is an exact eigendecomposition of the feature covariance. The 2-D map is
the exact O(N^2) heavy-tailed neighbor embedding: conditional neighbor
distributions calibrated to a target perplexity, then gradient descent on the
KL divergence with early exaggeration and a momentum switch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .rngstreams import TAG_PROJECTION, rng_stream

F64 = np.float64


@dataclass(frozen=True)
class PcaResult:
    reduced: np.ndarray  # (N, out_dim) float64
    components: np.ndarray  # (dim, out_dim) float64, orthonormal columns
    eigenvalues: np.ndarray  # all covariance eigenvalues, descending
    explained_variance_ratio: np.ndarray  # (out_dim,)


def pca(X: np.ndarray, out_dim: int) -> PcaResult:
    """Project onto the top out_dim covariance eigenvectors."""
    X = np.asarray(X, dtype=F64)
    if X.ndim != 2:
        raise ValidationError(f"pca expects a 2-D array, got shape {X.shape}")
    n, d = X.shape
    if n < 2:
        raise ValidationError("pca needs at least two points")
    if not 1 <= out_dim <= d:
        raise ValidationError(f"out_dim must be in [1, {d}], got {out_dim}")
    centered = X - X.mean(axis=0)
    cov = (centered.T @ centered) / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    # sign convention: largest-magnitude entry of each component is positive
    for j in range(d):
        col = eigvecs[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            eigvecs[:, j] = -col
    components = eigvecs[:, :out_dim]
    total = float(np.clip(eigvals, 0.0, None).sum())
    ratios = (
        np.clip(eigvals[:out_dim], 0.0, None) / total
        if total > 0
        else np.zeros(out_dim, dtype=F64)
    )
    return PcaResult(
        reduced=centered @ components,
        components=components,
        eigenvalues=eigvals,
        explained_variance_ratio=ratios,
    )


@dataclass(frozen=True)
class ProjectionConfig:
    pca_dim: int = 50
    perplexity: float = 30.0
    iterations: int = 500
    learning_rate: float = 200.0
    early_exaggeration: float = 12.0
    early_exaggeration_iters: int = 250
    momentum_start: float = 0.5
    momentum_final: float = 0.8
    momentum_switch_iter: int = 250
    seed: int = 0

    def __post_init__(self):
        if self.pca_dim < 1:
            raise ValidationError("pca_dim must be >= 1")
        if not self.perplexity > 0:
            raise ValidationError("perplexity must be > 0")
        if self.iterations < 1:
            raise ValidationError("iterations must be >= 1")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be > 0")
        if not self.early_exaggeration >= 1:
            raise ValidationError("early_exaggeration must be >= 1")


def _pairwise_sq_dists(X: np.ndarray) -> np.ndarray:
    sq = np.sum(X * X, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.fill_diagonal(d2, 0.0)
    return np.maximum(d2, 0.0)


def conditional_probabilities(
    sq_dists: np.ndarray, perplexity: float, tol: float = 1e-5, max_iter: int = 100
) -> np.ndarray:
    """Per-row neighbor distributions with entropy log(perplexity).

    Each row's precision is found by binary search; rows where the target
    entropy is unreachable (degenerate geometry) keep the closest achievable
    distribution after max_iter halvings.
    """
    n = sq_dists.shape[0]
    target = np.log(perplexity)
    P = np.zeros((n, n), dtype=F64)
    idx = np.arange(n)
    for i in range(n):
        di = sq_dists[i, idx != i]
        beta, beta_min, beta_max = 1.0, -np.inf, np.inf
        shifted = di - di.min()
        for _ in range(max_iter):
            w = np.exp(-beta * shifted)
            wsum = w.sum()
            if wsum <= 0:
                h = 0.0
                p = np.zeros_like(w)
                p[np.argmin(shifted)] = 1.0
            else:
                p = w / wsum
                # H = log(sum w) + beta * E[d]; equals -sum p log p in nats
                h = float(np.log(wsum) + beta * np.sum(shifted * p))
            diff = h - target
            if abs(diff) < tol:
                break
            if diff > 0:
                beta_min = beta
                beta = beta * 2.0 if np.isinf(beta_max) else (beta + beta_max) / 2.0
            else:
                beta_max = beta
                beta = beta / 2.0 if np.isinf(beta_min) else (beta + beta_min) / 2.0
        P[i, idx != i] = p
    return P


def _joint_probabilities(P_cond: np.ndarray) -> np.ndarray:
    n = P_cond.shape[0]
    return (P_cond + P_cond.T) / (2.0 * n)


def _q_matrix(Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    num = 1.0 / (1.0 + _pairwise_sq_dists(Y))
    np.fill_diagonal(num, 0.0)
    return num / num.sum(), num


def _kl_divergence(P: np.ndarray, Q: np.ndarray) -> float:
    mask = P > 0
    q = np.maximum(Q[mask], 1e-12)
    p = P[mask]
    return float(np.sum(p * (np.log(p) - np.log(q))))


def tsne(
    X: np.ndarray, cfg: ProjectionConfig = ProjectionConfig()
) -> tuple[np.ndarray, float, float]:
    """Exact 2-D neighbor embedding; returns (points, initial KL, final KL)."""
    X = np.asarray(X, dtype=F64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValidationError("tsne needs a 2-D array with at least two rows")
    n = X.shape[0]
    if not 3.0 * cfg.perplexity < n - 1:
        raise ValidationError(
            f"perplexity {cfg.perplexity} too large for {n} points; "
            f"need 3 * perplexity < N - 1"
        )
    P = _joint_probabilities(conditional_probabilities(_pairwise_sq_dists(X), cfg.perplexity))
    rng = rng_stream(cfg.seed, TAG_PROJECTION)
    Y = rng.normal(0.0, 1e-4, size=(n, 2))
    velocity = np.zeros_like(Y)

    Q0, _ = _q_matrix(Y)
    kl_initial = _kl_divergence(P, Q0)

    for it in range(cfg.iterations):
        P_eff = P * cfg.early_exaggeration if it < cfg.early_exaggeration_iters else P
        Q, num = _q_matrix(Y)
        PQ = (P_eff - Q) * num
        grad = 4.0 * ((np.diag(PQ.sum(axis=1)) - PQ) @ Y)
        momentum = (
            cfg.momentum_start if it < cfg.momentum_switch_iter else cfg.momentum_final
        )
        velocity = momentum * velocity - cfg.learning_rate * grad
        Y = Y + velocity
        Y = Y - Y.mean(axis=0)

    Qf, _ = _q_matrix(Y)
    kl_final = _kl_divergence(P, Qf)
    return Y, kl_initial, kl_final


@dataclass(frozen=True)
class ProjectedPoint:
    id: str
    label: int
    x: float
    y: float


def project_embeddings(
    ids: list[str],
    labels: list[int],
    vectors: np.ndarray,
    cfg: ProjectionConfig = ProjectionConfig(),
) -> tuple[list[ProjectedPoint], dict]:
    """PCA (skipped when already narrow) followed by the 2-D embedding."""
    vectors = np.asarray(vectors, dtype=F64)
    if vectors.ndim != 2 or len(ids) != vectors.shape[0] or len(labels) != len(ids):
        raise ValidationError("ids, labels, and vectors must align")
    info: dict = {}
    X = vectors
    if vectors.shape[1] > cfg.pca_dim:
        result = pca(vectors, cfg.pca_dim)
        X = result.reduced
        info["pca_applied"] = True
        info["explained_variance"] = float(result.explained_variance_ratio.sum())
    else:
        info["pca_applied"] = False
    Y, kl_initial, kl_final = tsne(X, cfg)
    info["kl_initial"] = kl_initial
    info["kl_final"] = kl_final
    points = [
        ProjectedPoint(id=i, label=int(l), x=float(p[0]), y=float(p[1]))
        for i, l, p in zip(ids, labels, Y)
    ]
    return points, info


def export_projection(points: list[ProjectedPoint], path) -> None:
    """CSV id,label,x,y; coordinates use repr so parsing restores exact floats."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "x", "y"])
        for p in points:
            writer.writerow([p.id, p.label, repr(p.x), repr(p.y)])
