# tools/perception.py
"""
Three-step point-cloud object detection:
1) crop to the region of interest
2) remove ground returns (seeded RANSAC plane fit)
3) cluster the remaining points and fit an oriented box to each cluster

RANSAC hypotheses are drawn on the lexicographically sorted cloud, so the
result does not depend on the order points arrive in.
"""

import math
import logging
from dataclasses import dataclass
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import ConvexHull, QhullError, cKDTree

from tools.geo import Vec3
from tools.lidar import PointCloud

logger = logging.getLogger(__name__)

HALF_PI = 0.5 * math.pi


@dataclass(frozen=True)
class Roi:
    x: Tuple[float, float] = (-40.0, 40.0)
    y: Tuple[float, float] = (-40.0, 40.0)
    z: Tuple[float, float] = (-0.5, 3.5)

    def __post_init__(self):
        for name in ("x", "y", "z"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"roi {name}: min must be < max")

    @property
    def lo(self) -> np.ndarray:
        return np.array([self.x[0], self.y[0], self.z[0]])

    @property
    def hi(self) -> np.ndarray:
        return np.array([self.x[1], self.y[1], self.z[1]])


@dataclass(frozen=True)
class PerceptionConfig:
    roi: Roi = Roi()
    ransac_iters: int = 100
    ransac_inlier_dist: float = 0.2
    ransac_refine: bool = True
    cluster_eps: float = 0.7
    cluster_min_pts: int = 5
    min_box_extent: float = 0.2

    def __post_init__(self):
        if self.cluster_eps <= 0.0:
            raise ValueError("cluster_eps must be > 0")
        if self.cluster_min_pts < 1:
            raise ValueError("cluster_min_pts must be >= 1")
        if self.ransac_inlier_dist <= 0.0:
            raise ValueError("ransac_inlier_dist must be > 0")
        if self.ransac_iters < 1:
            raise ValueError("ransac_iters must be >= 1")


class BoxGeometry(NamedTuple):
    center: Vec3
    extent: Tuple[float, float, float]
    yaw: float


@dataclass(frozen=True)
class Detection:
    center: Vec3
    extent: Tuple[float, float, float]
    yaw: float
    n_points: int
    t: float

    def to_dict(self) -> dict:
        return {"center": list(self.center), "extent": list(self.extent), "yaw": self.yaw, "n_points": self.n_points}


# ---------------- step 1 ----------------
def crop_roi(cloud: PointCloud, roi: Roi) -> PointCloud:
    if len(cloud) == 0:
        return cloud
    p = cloud.points
    mask = np.all((p >= roi.lo) & (p <= roi.hi), axis=1)
    return cloud.subset(mask)


# ---------------- step 2 ----------------
def _planes_through(triples: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Unit normals and offsets of the planes through each (3, 3) triple; zero rows when degenerate."""
    n = np.cross(triples[:, 1] - triples[:, 0], triples[:, 2] - triples[:, 0])
    norm = np.linalg.norm(n, axis=1)
    ok = norm >= 1e-12
    n[ok] /= norm[ok, None]
    n[~ok] = 0.0
    return n, -np.einsum("ij,ij->i", n, triples[:, 0])


def ground_mask(points: np.ndarray, cfg: PerceptionConfig, seed: int) -> np.ndarray:
    """Boolean mask of ground inliers (in the input order)."""
    n = points.shape[0]
    if n < 3:
        return np.zeros(n, dtype=bool)
    order = np.lexsort((points[:, 2], points[:, 1], points[:, 0]))
    pts = points[order]

    rng = np.random.Generator(np.random.Philox(key=int(seed) & 0xFFFFFFFFFFFFFFFF))
    # three distinct indices per hypothesis
    first = rng.integers(0, n, size=cfg.ransac_iters)
    second = (first + rng.integers(1, n, size=cfg.ransac_iters)) % n
    third = rng.integers(0, n - 2, size=cfg.ransac_iters)
    lo, hi = np.minimum(first, second), np.maximum(first, second)
    third = third + (third >= lo) + (third + 1 >= hi)
    normals, offsets = _planes_through(pts[np.stack([first, second, third], axis=1)])

    dist = np.abs(pts @ normals.T + offsets[None, :])
    valid = normals.any(axis=1)
    counts = np.where(valid, (dist <= cfg.ransac_inlier_dist).sum(axis=0), -1)
    best = int(np.argmax(counts))
    inliers = dist[:, best] <= cfg.ransac_inlier_dist if counts[best] > 0 else np.zeros(n, dtype=bool)

    if cfg.ransac_refine and inliers.sum() >= 3:
        q = pts[inliers]
        centroid = q.mean(axis=0)
        _, _, vt = np.linalg.svd(q - centroid, full_matrices=False)
        normal = vt[-1]
        inliers = np.abs((pts - centroid) @ normal) <= cfg.ransac_inlier_dist

    mask = np.zeros(n, dtype=bool)
    mask[order] = inliers
    return mask


def remove_ground(cloud: PointCloud, cfg: PerceptionConfig, seed: int) -> Tuple[PointCloud, PointCloud]:
    mask = ground_mask(cloud.points, cfg, seed)
    return cloud.subset(mask), cloud.subset(~mask)


# ---------------- step 3 ----------------
def cluster(cloud: PointCloud, eps: float, min_pts: int) -> List[List[int]]:
    """Connected components of the eps-radius graph, small ones dropped."""
    n = len(cloud)
    if n == 0:
        return []
    pairs = cKDTree(cloud.points).query_pairs(eps, output_type="ndarray")
    graph = csr_matrix((np.ones(len(pairs), dtype=np.int8), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)

    order = np.argsort(labels, kind="stable")
    bounds = np.flatnonzero(np.diff(labels[order])) + 1
    clusters = [g.tolist() for g in np.split(order, bounds) if len(g) >= min_pts]
    clusters.sort(key=lambda g: g[0])
    return clusters


def convex_hull(xy: np.ndarray) -> np.ndarray:
    """Counter-clockwise hull vertices; degenerate inputs give their distinct extreme points."""
    pts = np.unique(np.asarray(xy, dtype=float).reshape(-1, 2), axis=0)
    if len(pts) >= 3:
        try:
            return pts[ConvexHull(pts).vertices]
        except QhullError:
            pass
    if len(pts) <= 1:
        return pts
    # collinear: the two points farthest apart along the line
    direction = pts[-1] - pts[0]
    proj = pts @ direction
    return pts[[int(np.argmin(proj)), int(np.argmax(proj))]]


def min_area_rect(xy: np.ndarray) -> Tuple[np.ndarray, float, float, float]:
    """(center_xy, length, width, yaw) with yaw in [0, pi/2) and length along yaw."""
    hull = convex_hull(xy)
    if len(hull) == 1:
        return hull[0].copy(), 0.0, 0.0, 0.0

    edges = np.roll(hull, -1, axis=0) - hull
    keep = np.hypot(edges[:, 0], edges[:, 1]) > 0.0
    angles = np.arctan2(edges[keep, 1], edges[keep, 0])
    u = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    v = np.stack([-u[:, 1], u[:, 0]], axis=1)
    pu = hull @ u.T
    pv = hull @ v.T
    a = pu.max(axis=0) - pu.min(axis=0)
    b = pv.max(axis=0) - pv.min(axis=0)
    areas = a * b
    best = int(np.argmin(areas))

    theta = float(angles[best])
    cu = 0.5 * (pu[:, best].max() + pu[:, best].min())
    cv = 0.5 * (pv[:, best].max() + pv[:, best].min())
    center = cu * u[best] + cv * v[best]
    length, width = float(a[best]), float(b[best])

    k = math.floor(theta / HALF_PI)
    yaw = theta - k * HALF_PI
    if yaw >= HALF_PI - 1e-12:
        yaw, k = 0.0, k + 1
    if yaw < 0.0:
        yaw = 0.0
    if k % 2:
        length, width = width, length
    return center, length, width, yaw


def fit_box(points: Sequence, min_box_extent: float = 0.2) -> BoxGeometry:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("fit_box needs at least one point")
    center_xy, length, width, yaw = min_area_rect(pts[:, :2])
    z_lo, z_hi = float(pts[:, 2].min()), float(pts[:, 2].max())
    extent = (max(length, min_box_extent), max(width, min_box_extent), max(z_hi - z_lo, min_box_extent))
    return BoxGeometry(Vec3(float(center_xy[0]), float(center_xy[1]), 0.5 * (z_lo + z_hi)), extent, yaw)


# ---------------- pipeline ----------------
def detect(cloud: PointCloud, cfg: PerceptionConfig, seed: int) -> List[Detection]:
    cropped = crop_roi(cloud, cfg.roi)
    _, obstacles = remove_ground(cropped, cfg, seed)
    detections = []
    for idx in cluster(obstacles, cfg.cluster_eps, cfg.cluster_min_pts):
        geom = fit_box(obstacles.points[idx], cfg.min_box_extent)
        detections.append(Detection(geom.center, geom.extent, geom.yaw, len(idx), cloud.t))
    logger.debug("detect t=%.2f in=%d roi=%d obstacles=%d detections=%d",
                 cloud.t, len(cloud), len(cropped), len(obstacles), len(detections))
    return detections
