"""Point clouds, neighbour search and local plane patches."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateNeighborhood, EmptyCloud



@dataclass
class PointCloud:
    points: np.ndarray
    intensity: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite coordinates")
        if self.intensity is not None:
            self.intensity = np.asarray(self.intensity, dtype=float).reshape(-1)
            if len(self.intensity) != len(self.points):
                raise ValueError("intensity length does not match point count")

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class PlanePatch:
    normal: np.ndarray
    centroid: np.ndarray
    eigenvalues: np.ndarray  # descending
    neighbor_count: int


@dataclass
class CloudConfig:
    neighbors: int = 20
    ratio_threshold: float = 10.0
    max_radius: float = 1.0


class SpatialIndex:
    """Exact k-nearest-neighbour index over a cloud. Immutable after construction."""

    def __init__(self, cloud: PointCloud, workers: int = 1):
        if len(cloud) == 0:
            raise EmptyCloud("cannot index an empty point cloud")
        self.cloud = cloud
        self.points = cloud.points
        self.workers = workers
        self._tree = cKDTree(self.points)

    def __len__(self):
        return len(self.points)

    def knn(self, queries, k: int, max_radius: float = np.inf):
        """Distances and indices of the ``k`` nearest points.

        Neighbours beyond ``max_radius`` come back with distance ``inf`` and
        index ``len(self)``.
        """
        q = np.atleast_2d(np.asarray(queries, dtype=float))
        k = min(k, len(self.points))
        dist, idx = self._tree.query(q, k=k, distance_upper_bound=max_radius, workers=self.workers)
        dist = np.asarray(dist).reshape(len(q), k)
        idx = np.asarray(idx).reshape(len(q), k)
        return dist, idx


def build_index(cloud: PointCloud, workers: int = 1) -> SpatialIndex:
    return SpatialIndex(cloud, workers=workers)


def _orient(normals, centroids, viewpoint):
    if viewpoint is not None:
        s = np.einsum("ij,ij->i", normals, np.asarray(viewpoint, dtype=float) - centroids)
        flip = s < 0
    else:
        nz = np.abs(normals) > 1e-12
        first = np.argmax(nz, axis=1)
        flip = normals[np.arange(len(normals)), first] < 0
    normals[flip] *= -1.0
    return normals


def fit_planes(neighborhoods, viewpoint=None):
    """Batched plane fit of ``(N, l, 3)`` neighbourhoods.

    Returns ``(normals, centroids, eigenvalues)`` with eigenvalues sorted
    descending; the covariance uses ``1/l`` normalisation.
    """
    Q = np.asarray(neighborhoods, dtype=float)
    centroids = Q.mean(axis=1)
    d = Q - centroids[:, None, :]
    A = np.einsum("nki,nkj->nij", d, d) / Q.shape[1]
    w, v = np.linalg.eigh(A)
    normals = np.ascontiguousarray(v[:, :, 0])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    normals = _orient(normals, centroids, viewpoint)
    return normals, centroids, w[:, ::-1]


def fit_plane(neighbors, viewpoint=None) -> PlanePatch:
    Q = np.asarray(neighbors, dtype=float).reshape(-1, 3)
    if len(Q) < 3:
        raise DegenerateNeighborhood(f"need at least 3 points to fit a plane, got {len(Q)}")
    if np.all(np.abs(Q - Q[0]) == 0):
        raise DegenerateNeighborhood("all neighbourhood points coincide")
    n, c, lam = fit_planes(Q[None], viewpoint)
    return PlanePatch(normal=n[0], centroid=c[0], eigenvalues=lam[0], neighbor_count=len(Q))


def plane_validity(patch: PlanePatch, ratio_threshold: float) -> bool:
    return bool(planarity_ok(patch.eigenvalues, ratio_threshold))


def planarity_ok(eigenvalues, ratio_threshold):
    """``lambda2 / lambda3 > threshold``, written so an exact plane (``lambda3 = 0``) always passes."""
    lam = np.asarray(eigenvalues, dtype=float)
    return lam[..., 1] > ratio_threshold * np.maximum(lam[..., 2], 0.0)


@dataclass
class PatchQuery:
    """Result of looking up plane patches for a batch of query points."""

    normals: np.ndarray
    centroids: np.ndarray
    eigenvalues: np.ndarray
    found: np.ndarray  # full neighbourhood inside the radius
    planar: np.ndarray  # found and passes the eigenvalue-ratio test
    distances: np.ndarray = field(default=None)  # |n^T (p - q)|, nan where not found

    @property
    def valid(self):
        return self.planar


def query_patches(index: SpatialIndex, queries, cfg: CloudConfig) -> PatchQuery:
    q = np.atleast_2d(np.asarray(queries, dtype=float))
    n = len(q)
    normals = np.full((n, 3), np.nan)
    centroids = np.full((n, 3), np.nan)
    lam = np.full((n, 3), np.nan)
    found = np.zeros(n, dtype=bool)
    planar = np.zeros(n, dtype=bool)
    dist = np.full(n, np.nan)
    if n == 0:
        return PatchQuery(normals, centroids, lam, found, planar, dist)
    k = cfg.neighbors
    if len(index) >= k:
        dd, ii = index.knn(q, k, cfg.max_radius)
        found = np.all(np.isfinite(dd), axis=1)
    if np.any(found):
        nb = index.points[ii[found]]
        nn, cc, ll = fit_planes(nb)
        normals[found] = nn
        centroids[found] = cc
        lam[found] = ll
        planar[found] = planarity_ok(ll, cfg.ratio_threshold)
        dist[found] = np.abs(np.einsum("ij,ij->i", nn, q[found] - cc))
    return PatchQuery(normals, centroids, lam, found, planar, dist)
