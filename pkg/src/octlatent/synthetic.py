"""Seeded synthetic structured clouds (planes, line segments, Gaussian clusters)."""

from __future__ import annotations

import numpy as np

from .pcio import PointCloud


def _plane(rng, n):
    origin = rng.uniform(-20, 20, 3)
    u, v = np.linalg.qr(rng.normal(size=(3, 3)))[0][:, :2].T
    s = rng.uniform(5, 25, 2)
    a = rng.uniform(-1, 1, (n, 2)) * s
    return origin + a[:, :1] * u + a[:, 1:] * v + rng.normal(0, 0.03, (n, 3))


def _segment(rng, n):
    a = rng.uniform(-25, 25, 3)
    b = a + rng.normal(0, 12, 3)
    t = rng.uniform(0, 1, (n, 1))
    return a + t * (b - a) + rng.normal(0, 0.05, (n, 3))


def _cluster(rng, n):
    return rng.uniform(-20, 20, 3) + rng.normal(0, rng.uniform(0.5, 3.0), (n, 3))


def _ground(rng, n):
    xy = rng.uniform(-30, 30, (n, 2))
    z = -2.0 + 0.02 * xy[:, 0] + rng.normal(0, 0.02, n)
    return np.column_stack([xy, z])


_KINDS = (_plane, _segment, _cluster)


def structured_cloud(seed: int, n_points: int = 5000, parts: int | None = None) -> PointCloud:
    """A LiDAR-like scene: a ground plane plus random planes, segments and blobs."""
    rng = np.random.default_rng(seed)
    parts = parts or int(rng.integers(3, 8))
    weights = rng.dirichlet(np.ones(parts + 1))
    counts = np.maximum(1, np.floor(weights * n_points).astype(int))
    counts[0] += n_points - counts.sum()
    chunks = [_ground(rng, max(counts[0], 1))]
    for c in counts[1:]:
        chunks.append(_KINDS[int(rng.integers(len(_KINDS)))](rng, int(c)))
    pts = np.concatenate(chunks)[:n_points]
    return PointCloud(pts)


def corpus(seeds, n_points: int = 5000) -> list[PointCloud]:
    return [structured_cloud(int(s), n_points) for s in seeds]
