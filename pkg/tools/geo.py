# tools/geo.py
"""
Coordinate frames used across the pipeline.

- local tangent plane (equirectangular) between WGS-84 lat/lon/alt and the
  simulator's ENU metres, anchored at a per-scenario GeoOrigin
- planar rigid transforms between a vehicle body frame and the world frame
- ENU yaw <-> compass heading (clockwise from north)
"""

import math
from dataclasses import dataclass
from typing import NamedTuple, Tuple

import numpy as np

from utils.errors import DomainError
from utils.helpers import normalize_angle

EARTH_RADIUS = 6378137.0
DEG = math.pi / 180.0


class Vec3(NamedTuple):
    x: float
    y: float
    z: float = 0.0


@dataclass(frozen=True)
class GeoOrigin:
    lat0: float
    lon0: float
    alt0: float = 0.0

    def __post_init__(self):
        _require_finite(self.lat0, self.lon0, self.alt0)
        if abs(self.lat0) >= 89.0:
            raise DomainError(f"origin latitude {self.lat0} too close to a pole")


@dataclass(frozen=True)
class Pose2:
    x: float
    y: float
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))


def _require_finite(*values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise DomainError(f"non-finite coordinate {v!r}")


# ---------------- geodesy ----------------
def lla_to_enu(lat: float, lon: float, alt: float, origin: GeoOrigin) -> Vec3:
    _require_finite(lat, lon, alt)
    x = (lon - origin.lon0) * DEG * EARTH_RADIUS * math.cos(origin.lat0 * DEG)
    y = (lat - origin.lat0) * DEG * EARTH_RADIUS
    return Vec3(x, y, alt - origin.alt0)


def enu_to_lla(p: Vec3, origin: GeoOrigin) -> Tuple[float, float, float]:
    _require_finite(p[0], p[1], p[2])
    lat = origin.lat0 + p[1] / (EARTH_RADIUS * DEG)
    lon = origin.lon0 + p[0] / (EARTH_RADIUS * DEG * math.cos(origin.lat0 * DEG))
    return lat, lon, p[2] + origin.alt0


# ---------------- rigid transforms ----------------
def body_to_world(pose: Pose2, p: Vec3) -> Vec3:
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    return Vec3(pose.x + c * p[0] - s * p[1], pose.y + s * p[0] + c * p[1], p[2])


def world_to_body(pose: Pose2, p: Vec3) -> Vec3:
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    dx, dy = p[0] - pose.x, p[1] - pose.y
    return Vec3(c * dx + s * dy, -s * dx + c * dy, p[2])


def body_to_world_array(pose: Pose2, pts: np.ndarray) -> np.ndarray:
    """Vectorised body_to_world over an (N, 3) array."""
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    out = np.array(pts, dtype=float, copy=True)
    out[:, 0] = pose.x + c * pts[:, 0] - s * pts[:, 1]
    out[:, 1] = pose.y + s * pts[:, 0] + c * pts[:, 1]
    return out


def world_to_body_array(pose: Pose2, pts: np.ndarray) -> np.ndarray:
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    dx, dy = pts[:, 0] - pose.x, pts[:, 1] - pose.y
    out = np.array(pts, dtype=float, copy=True)
    out[:, 0] = c * dx + s * dy
    out[:, 1] = -s * dx + c * dy
    return out


def rotate_xy(yaw: float, vx: float, vy: float) -> Tuple[float, float]:
    c, s = math.cos(yaw), math.sin(yaw)
    return c * vx - s * vy, s * vx + c * vy


# ---------------- headings ----------------
def yaw_to_heading_deg(yaw: float) -> float:
    """ENU yaw (CCW from east) to degrees clockwise from north in [0, 360)."""
    h = math.fmod(90.0 - yaw / DEG, 360.0)
    if h < 0.0:
        h += 360.0
    return 0.0 if h >= 360.0 else h


def heading_deg_to_yaw(heading: float) -> float:
    return normalize_angle((90.0 - heading) * DEG)
