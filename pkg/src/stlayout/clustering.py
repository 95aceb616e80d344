"""Coarse layouts from inversion-time self-attention features.

Per-frame K-means over token features, then cluster ids are made
consistent across frames by matching centroids to frame 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.optimize import linear_sum_assignment

from .diffusion.denoiser import substream
from .diffusion.sampling import Trajectory
from .layout import LayoutSet, RegionSpec, resolve_overlaps


class ClusteringError(ValueError):
    pass


def collect_features(trajectory: Trajectory, block: int, level_index: int,
                     frames: int | None = None) -> np.ndarray:
    """Recorded features as an (N, T, d) array."""
    key = (block, level_index)
    if key not in trajectory.features:
        raise ClusteringError(f"features not captured at block {block}, level index {level_index}")
    feats = trajectory.features[key].numpy()
    n = frames if frames is not None else trajectory.latents.shape[1]
    return feats.reshape(n, -1, feats.shape[-1])


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    history: list[float] = field(default_factory=list)
    iterations: int = 0


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centroids = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d = _sq_dists(x, np.asarray(centroids)).min(axis=1)
        total = d.sum()
        idx = rng.integers(len(x)) if total <= 0 else rng.choice(len(x), p=d / total)
        centroids.append(x[idx])
    return np.array(centroids, dtype=np.float64)


def kmeans(features: np.ndarray, k: int, seed: int = 0, max_iters: int = 100,
           tol: float = 1e-6) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    An empty cluster is re-seeded at the point farthest from its current
    centroid. Raises if inertia ever increases (beyond float rounding).
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ClusteringError(f"features must be (T, d), got shape {x.shape}")
    if not 1 <= k <= len(x):
        raise ClusteringError(f"k={k} must lie in [1, {len(x)}]")
    rng = substream(seed, "kmeans")
    centroids = _kmeans_pp(x, k, rng)
    history: list[float] = []
    labels = np.zeros(len(x), dtype=np.int64)
    it = 0
    for it in range(1, max_iters + 1):
        d = _sq_dists(x, centroids)
        labels = d.argmin(axis=1)
        inertia = float(d[np.arange(len(x)), labels].sum())
        _check_monotone(history, inertia)
        history.append(inertia)
        new = centroids.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new[j] = x[members].mean(axis=0)
        for j in range(k):
            if not (labels == j).any():
                dist = _sq_dists(x, new).min(axis=1)
                far = int(dist.argmax())
                new[j] = x[far]
                labels[far] = j
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        if shift < tol:
            break
    d = _sq_dists(x, centroids)
    labels = d.argmin(axis=1)
    inertia = float(d[np.arange(len(x)), labels].sum())
    _check_monotone(history, inertia)
    history.append(inertia)
    return KMeansResult(labels, centroids, inertia, history, it)


def _check_monotone(history: list[float], inertia: float) -> None:
    if history and inertia > history[-1] * (1 + 1e-9) + 1e-12:
        raise ClusteringError(f"inertia increased from {history[-1]} to {inertia}")


@dataclass
class ClusterLayout:
    """``labels`` is (N, T); ``centroids`` is (N, k, d)."""

    labels: np.ndarray
    centroids: np.ndarray
    k: int


def cluster_frames(features: np.ndarray, k: int, seed: int = 0, max_iters: int = 100,
                   tol: float = 1e-6) -> ClusterLayout:
    labels, centroids = [], []
    for i, frame in enumerate(features):
        res = kmeans(frame, k, seed=seed * 1009 + i, max_iters=max_iters, tol=tol)
        labels.append(res.labels)
        centroids.append(res.centroids)
    return ClusterLayout(np.stack(labels), np.stack(centroids), k)


def _cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    an = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    bn = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    return an @ bn.T


def match_clusters(layout: ClusterLayout) -> ClusterLayout:
    """Relabel every frame so its clusters line up with frame 0.

    Uses the one-to-one assignment maximizing total centroid cosine similarity.
    """
    labels = layout.labels.copy()
    centroids = layout.centroids.copy()
    ref = layout.centroids[0]
    for i in range(1, len(labels)):
        rows, cols = linear_sum_assignment(-_cosine(ref, layout.centroids[i]))
        # frame-i cluster cols[r] becomes id rows[r]
        relabel = np.empty(layout.k, dtype=np.int64)
        relabel[cols] = rows
        labels[i] = relabel[layout.labels[i]]
        centroids[i, rows] = layout.centroids[i, cols]
    return ClusterLayout(labels, centroids, layout.k)


def layout_from_clusters(clusters: ClusterLayout, bindings: Mapping[int, RegionSpec],
                         resolution: tuple[int, int],
                         global_prompt_tokens=()) -> LayoutSet:
    """Bound clusters become region masks; everything else is background.

    Several clusters may bind to the same region (their masks are OR-ed).
    """
    regions: dict[int, RegionSpec] = {}
    for cid, spec in bindings.items():
        if not 0 <= cid < clusters.k:
            raise ClusteringError(f"binding to missing cluster {cid} (k={clusters.k})")
        regions.setdefault(spec.id, spec)
    ordered = sorted(regions.values(), key=lambda r: r.id)
    n = clusters.labels.shape[0]
    h, w = resolution
    masks = np.zeros((n, len(ordered), h, w), dtype=bool)
    index = {r.id: i for i, r in enumerate(ordered)}
    for cid, spec in bindings.items():
        masks[:, index[spec.id]] |= (clusters.labels == cid).reshape(n, h, w)
    return resolve_overlaps(LayoutSet(ordered, masks, tuple(global_prompt_tokens)))
