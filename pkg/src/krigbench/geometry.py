"""Planar geometry under node perturbation: distances, kNN, midpoint hulls, uniform sampling.

A node's perturbation support is the convex hull of the midpoints between the
node and its graph neighbors. Hulls degenerate gracefully: one midpoint gives a
point, collinear midpoints give a segment, anything else a CCW convex polygon.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.spatial import ConvexHull

from .errors import ConfigError

DistanceFn = Callable[[np.ndarray, np.ndarray], np.ndarray]

# Below this (relative to the point cloud scale) a singular value counts as zero
# when classifying the affine dimension of a midpoint set.
_RANK_TOL = 1e-12


@dataclass(frozen=True)
class NodeDomain:
    """Perturbation support of one node.

    vertices are hull vertices: a single point (hull_dim 0), the two segment
    endpoints (hull_dim 1), or a strictly convex CCW polygon (hull_dim 2).
    """

    owner: int
    vertices: np.ndarray
    hull_dim: int


def pairwise_distances(coords: np.ndarray, metric: DistanceFn | None = None) -> np.ndarray:
    """Symmetric distance matrix with a zero diagonal.

    `metric` maps two (n, d) arrays to (n,) distances; defaults to Euclidean.
    """
    coords = np.asarray(coords, dtype=float)
    if coords.ndim != 2 or coords.shape[0] < 1:
        raise ConfigError("coords must be a nonempty (n, d) array")
    n = coords.shape[0]
    if metric is None:
        diff = coords[:, None, :] - coords[None, :, :]
        d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    else:
        d = np.empty((n, n))
        for i in range(n):
            d[i] = metric(np.broadcast_to(coords[i], coords.shape), coords)
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return d


def knn(coords: np.ndarray, k: int, metric: DistanceFn | None = None) -> np.ndarray:
    """Indices of the k nearest other nodes per node, shape (n, k).

    Ties are broken by lower node id so the result is reproducible.
    """
    coords = np.asarray(coords, dtype=float)
    n = coords.shape[0]
    if not 0 < k < n:
        raise ConfigError(f"k must satisfy 0 < k < n, got k={k}, n={n}")
    d = pairwise_distances(coords, metric)
    ids = np.arange(n)
    out = np.empty((n, k), dtype=int)
    for v in range(n):
        order = np.lexsort((ids, d[v]))
        out[v] = order[order != v][:k]
    return out


def node_domain(v: int, coords: np.ndarray, neighbors: np.ndarray) -> NodeDomain:
    """Convex hull of the midpoints between node v and each neighbor."""
    coords = np.asarray(coords, dtype=float)
    neighbors = np.asarray(neighbors, dtype=int)
    if neighbors.size == 0:
        raise ConfigError("node_domain requires at least one neighbor")
    mids = coords[v] + 0.5 * (coords[neighbors] - coords[v])
    mids = np.unique(mids, axis=0)
    if mids.shape[0] == 1:
        return NodeDomain(owner=v, vertices=mids, hull_dim=0)

    centered = mids - mids.mean(axis=0)
    scale = max(np.abs(centered).max(), 1.0)
    svals = np.linalg.svd(centered, compute_uv=False)
    rank = int(np.sum(svals > _RANK_TOL * scale * mids.shape[0]))
    if rank <= 1:
        # Collinear midpoints: keep the two extremes along the principal axis.
        direction = np.linalg.svd(centered)[2][0]
        t = centered @ direction
        lo, hi = mids[np.argmin(t)], mids[np.argmax(t)]
        if np.array_equal(lo, hi):
            return NodeDomain(owner=v, vertices=lo[None, :], hull_dim=0)
        return NodeDomain(owner=v, vertices=np.stack([lo, hi]), hull_dim=1)

    hull = ConvexHull(mids)
    return NodeDomain(owner=v, vertices=mids[hull.vertices], hull_dim=2)


def point_in_domain(domain: NodeDomain, point: np.ndarray, tol: float = 1e-12) -> bool:
    """Membership test with `tol` slack, matching the hull's intrinsic dimension."""
    p = np.asarray(point, dtype=float)
    verts = domain.vertices
    if domain.hull_dim == 0:
        return bool(np.max(np.abs(p - verts[0])) <= tol)
    if domain.hull_dim == 1:
        a, b = verts
        ab = b - a
        t = np.clip(np.dot(p - a, ab) / np.dot(ab, ab), 0.0, 1.0)
        return bool(np.linalg.norm(p - (a + t * ab)) <= tol)
    # CCW polygon: inside iff every edge cross product is nonnegative (with slack).
    nxt = np.roll(verts, -1, axis=0)
    edge = nxt - verts
    rel = p - verts
    cross = edge[:, 0] * rel[:, 1] - edge[:, 1] * rel[:, 0]
    return bool(np.all(cross >= -tol))


def domain_centroid(domain: NodeDomain) -> np.ndarray:
    """Centroid of the uniform law on the domain (area centroid for polygons)."""
    verts = domain.vertices
    if domain.hull_dim == 0:
        return verts[0].copy()
    if domain.hull_dim == 1:
        return verts.mean(axis=0)
    fan = verts.mean(axis=0)
    areas, centroids = [], []
    for i in range(len(verts)):
        a, b = verts[i], verts[(i + 1) % len(verts)]
        area = 0.5 * abs((a[0] - fan[0]) * (b[1] - fan[1]) - (b[0] - fan[0]) * (a[1] - fan[1]))
        areas.append(area)
        centroids.append((fan + a + b) / 3.0)
    areas = np.asarray(areas)
    return np.average(np.asarray(centroids), axis=0, weights=areas)


def sample_in_domain(domain: NodeDomain, rng: np.random.Generator) -> np.ndarray:
    """One draw from the uniform law on the domain.

    Polygons are sampled exactly: fan triangulation around the vertex centroid,
    area-weighted triangle choice, then a folded barycentric draw.
    """
    verts = domain.vertices
    if domain.hull_dim == 0:
        return verts[0].copy()
    if domain.hull_dim == 1:
        t = rng.random()
        return verts[0] + t * (verts[1] - verts[0])

    fan = verts.mean(axis=0)
    nxt = np.roll(verts, -1, axis=0)
    areas = 0.5 * np.abs(
        (verts[:, 0] - fan[0]) * (nxt[:, 1] - fan[1])
        - (nxt[:, 0] - fan[0]) * (verts[:, 1] - fan[1])
    )
    total = areas.sum()
    pick = np.searchsorted(np.cumsum(areas), rng.random() * total, side="right")
    pick = min(pick, len(verts) - 1)
    a, b = verts[pick], nxt[pick]
    u, w = rng.random(2)
    if u + w > 1.0:
        u, w = 1.0 - u, 1.0 - w
    return fan + u * (a - fan) + w * (b - fan)
