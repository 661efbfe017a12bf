"""Desk-scale MAUVE: k-means quantization of embeddings and divergence-frontier area."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from lookback.core import TokenSeq


@dataclass(frozen=True)
class MauveConfig:
    num_clusters: int | None = None  # None: max(2, (|P| + |Q|) // 10), capped at 500
    kmeans_iters: int = 300
    kmeans_restarts: int = 5
    scaling: float = 5.0
    grid_size: int = 25
    epsilon: float = 1e-6
    seed: int = 25

    def __post_init__(self):
        if self.num_clusters is not None and self.num_clusters < 1:
            raise ValueError("num_clusters must be >= 1")
        if self.grid_size < 2:
            raise ValueError("grid_size must be >= 2")
        if self.kmeans_iters < 1 or self.kmeans_restarts < 1:
            raise ValueError("k-means needs at least one iteration and one restart")
        if self.scaling <= 0 or self.epsilon <= 0:
            raise ValueError("scaling and epsilon must be positive")


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] + (centers * centers).sum(1)[None, :] - 2.0 * x @ centers.T
    return np.maximum(d, 0.0)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = _sq_dists(x, centers[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=closest / total)
        centers[i] = x[idx]
        closest = np.minimum(closest, _sq_dists(x, centers[i:i + 1])[:, 0])
    return centers


def kmeans(
    x: np.ndarray, k: int, restarts: int = 5, max_iter: int = 300, seed: int = 0
) -> tuple[np.ndarray, np.ndarray, float]:
    """Lloyd's algorithm from k-means++ seeds; best restart by inertia.

    Returns ``(labels, centers, inertia)``.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        centers = _kmeans_pp(x, k, rng)
        labels = np.full(n, -1)
        for _ in range(max_iter):
            d2 = _sq_dists(x, centers)
            new_labels = d2.argmin(1)
            if np.array_equal(new_labels, labels):
                break
            labels = new_labels
            for c in range(k):
                members = labels == c
                if members.any():
                    centers[c] = x[members].mean(0)
                else:
                    # Re-seed an empty cluster at the point worst served by its center.
                    far = int(d2[np.arange(n), labels].argmax())
                    centers[c] = x[far]
        d2 = _sq_dists(x, centers)
        labels = d2.argmin(1)
        inertia = float(d2[np.arange(n), labels].sum())
        if best is None or inertia < best[2]:
            best = (labels, centers.copy(), inertia)
    return best


def default_num_clusters(n_total: int) -> int:
    return min(500, max(2, n_total // 10))


def quantize(
    p_feats: np.ndarray, q_feats: np.ndarray, cfg: MauveConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Cluster both sides jointly and return smoothed cluster histograms."""
    p_feats = np.atleast_2d(np.asarray(p_feats, dtype=np.float64))
    q_feats = np.atleast_2d(np.asarray(q_feats, dtype=np.float64))
    if p_feats.shape[0] == 0 or q_feats.shape[0] == 0:
        raise ValueError("both sides need at least one text")
    joint = np.vstack([p_feats, q_feats])
    n = joint.shape[0]
    k = cfg.num_clusters or default_num_clusters(n)
    if k > n:
        warnings.warn(f"{n} embeddings for {k} clusters; using {n} clusters", stacklevel=2)
        k = n
    # Cluster rows in a canonical order so the result is independent of which
    # side comes first; this keeps the score symmetric under swapping.
    order = np.lexsort(joint.T[::-1])
    sorted_labels, _, _ = kmeans(joint[order], k, cfg.kmeans_restarts, cfg.kmeans_iters, cfg.seed)
    labels = np.empty(n, dtype=np.intp)
    labels[order] = sorted_labels
    n_p = p_feats.shape[0]
    p_hist = np.bincount(labels[:n_p], minlength=k) + cfg.epsilon
    q_hist = np.bincount(labels[n_p:], minlength=k) + cfg.epsilon
    return p_hist / p_hist.sum(), q_hist / q_hist.sum()


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    return float(max(0.0, np.sum(p * (np.log(p) - np.log(q)))))


def divergence_curve(p_hist: np.ndarray, q_hist: np.ndarray, cfg: MauveConfig) -> np.ndarray:
    """Frontier points (exp(-c KL(q||r)), exp(-c KL(p||r))) with r = l*p + (1-l)*q.

    The end points (0, 1) and (1, 0) are included.
    """
    c = cfg.scaling
    points = [(0.0, 1.0)]
    for lam in np.linspace(1e-6, 1 - 1e-6, cfg.grid_size):
        r = lam * p_hist + (1 - lam) * q_hist
        points.append((np.exp(-c * _kl(q_hist, r)), np.exp(-c * _kl(p_hist, r))))
    points.append((1.0, 0.0))
    return np.array(points)


def area_under_curve(curve: np.ndarray) -> float:
    x, y = curve[:, 0], curve[:, 1]
    idx = np.lexsort((-y, x))
    x, y = x[idx], y[idx]
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


def mauve_from_embeddings(p_feats: np.ndarray, q_feats: np.ndarray, cfg: MauveConfig | None = None) -> float:
    cfg = cfg or MauveConfig()
    p_hist, q_hist = quantize(p_feats, q_feats, cfg)
    return area_under_curve(divergence_curve(p_hist, q_hist, cfg))


def mauve(
    human_texts: Sequence[TokenSeq],
    model_texts: Sequence[TokenSeq],
    embedder,
    cfg: MauveConfig | None = None,
) -> float:
    if not human_texts or not model_texts:
        raise ValueError("mauve needs non-empty human and model text lists")
    p = np.stack([embedder.embed(t) for t in human_texts])
    q = np.stack([embedder.embed(t) for t in model_texts])
    return mauve_from_embeddings(p, q, cfg)
