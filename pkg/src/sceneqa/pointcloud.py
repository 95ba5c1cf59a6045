"""Point-cloud containers, normalisation and farthest point sampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 1:
            raise ValueError(f"points must be N x 3 with N >= 1, got shape {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.colors is not None:
            cols = np.asarray(self.colors, dtype=np.float64)
            if cols.shape != pts.shape:
                raise ValueError(f"colors shape {cols.shape} does not match points {pts.shape}")
            if cols.min() < 0 or cols.max() > 1:
                raise ValueError("colors must lie in [0, 1]")
            object.__setattr__(self, "colors", cols)

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, indices) -> PointCloud:
        idx = np.asarray(indices)
        return PointCloud(self.points[idx], None if self.colors is None else self.colors[idx])


@dataclass(frozen=True)
class AxisAlignedBox:
    center: np.ndarray
    half_extent: np.ndarray
    category: int = 0
    color_name: int = 0

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        h = np.asarray(self.half_extent, dtype=np.float64).reshape(3)
        if not (h > 0).all():
            raise ValueError(f"half_extent must be strictly positive, got {h}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_extent", h)

    def contains(self, points: np.ndarray, margin: float = 0.0) -> np.ndarray:
        pts = np.atleast_2d(points)
        return (np.abs(pts - self.center) <= self.half_extent + margin).all(axis=-1)

    def transformed(self, centroid: np.ndarray, scale: float) -> AxisAlignedBox:
        """Box expressed in the frame produced by ``normalize``."""
        return AxisAlignedBox((self.center - centroid) / scale, self.half_extent / scale,
                              self.category, self.color_name)


@dataclass(frozen=True)
class Normalization:
    cloud: PointCloud
    centroid: np.ndarray
    scale: float
    degenerate: bool = False

    def __iter__(self):
        return iter((self.cloud, self.centroid, self.scale))


def normalize(pc: PointCloud) -> Normalization:
    """Centre on the centroid and divide by the max absolute coordinate."""
    centroid = pc.points.mean(axis=0)
    centered = pc.points - centroid
    extent = float(np.abs(centered).max())
    degenerate = extent == 0.0
    scale = 1.0 if degenerate else extent
    return Normalization(PointCloud(centered / scale, pc.colors), centroid, scale, degenerate)


def farthest_point_sample(pc: PointCloud | np.ndarray, k: int, start: int = 0) -> np.ndarray:
    """Greedy max-min subset of ``k`` indices, starting at ``start``.

    Distances are squared Euclidean; ties go to the lowest index.
    """
    points = pc.points if isinstance(pc, PointCloud) else np.asarray(pc, dtype=np.float64)
    n = len(points)
    if not 1 <= k <= n:
        raise ValueError(f"farthest_point_sample: k={k} must satisfy 1 <= k <= N={n}")
    if not 0 <= start < n:
        raise ValueError(f"farthest_point_sample: start={start} outside [0, {n})")
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start
    best = np.sum((points - points[start]) ** 2, axis=1)
    best[start] = -1.0
    for i in range(1, k):
        nxt = int(np.argmax(best))
        chosen[i] = nxt
        d = np.sum((points - points[nxt]) ** 2, axis=1)
        np.minimum(best, d, out=best)
        best[nxt] = -1.0
    return chosen


def random_start(n: int, rng: np.random.Generator) -> int:
    return int(rng.integers(n))


def ball_group(points: np.ndarray, seeds: np.ndarray, radius: float, k: int) -> np.ndarray:
    """Indices of up to ``k`` points within ``radius`` of each seed, in index order.

    Seeds are point indices; a seed always belongs to its own group, and short
    groups are padded with the seed index.
    """
    centers = points[seeds]
    d2 = ((centers[:, None, :] - points[None, :, :]) ** 2).sum(-1)
    inside = d2 <= radius * radius
    inside[np.arange(len(seeds)), seeds] = True
    order = np.argsort(~inside, axis=1, kind="stable")[:, :k]
    counts = inside.sum(axis=1)
    slots = np.arange(order.shape[1])[None, :]
    group = np.where(slots < counts[:, None], order, seeds[:, None])
    if group.shape[1] < k:
        group = np.concatenate([group, np.repeat(seeds[:, None], k - group.shape[1], axis=1)], axis=1)
    return group


def resample(pc: PointCloud, count: int, rng: np.random.Generator) -> PointCloud:
    """Random subset of ``count`` points (with replacement only if the cloud is smaller)."""
    n = len(pc)
    idx = rng.choice(n, size=count, replace=count > n)
    return pc.subset(np.sort(idx))
