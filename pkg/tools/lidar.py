# tools/lidar.py
"""
Ray-cast spinning LiDAR over rigid actor boxes and the ground plane z = 0.

Every (channel, azimuth) ray returns at most one point: the nearest surface
it meets. Range noise comes from a counter-based generator, so the cloud only
depends on (world, config, seed), never on evaluation order.
"""

import math
import struct
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from tools.geo import Pose2, Vec3, world_to_body_array
from tools.world import ActorState, WorldState
from utils.helpers import counter_key, counter_normal_array

logger = logging.getLogger(__name__)

CLOUD_MAGIC = b"CVS1"
CLOUD_HEADER = struct.Struct("<4sdI")
NOISE_CLIP = 6.0


@dataclass(frozen=True)
class LidarConfig:
    channels: int = 16
    elev_min: float = math.radians(-15.0)
    elev_max: float = math.radians(1.0)
    azimuth_step: float = math.radians(0.4)
    max_range: float = 80.0
    range_noise_sigma: float = 0.02
    mount: Vec3 = Vec3(0.0, 0.0, 1.6)
    rate_hz: float = 10.0

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("lidar channels must be >= 1")
        if not (0.0 < self.azimuth_step <= 2.0 * math.pi):
            raise ValueError("lidar azimuth_step must be in (0, 2pi]")
        if self.max_range <= 0.0:
            raise ValueError("lidar max_range must be > 0")
        if self.range_noise_sigma < 0.0:
            raise ValueError("lidar range_noise_sigma must be >= 0")
        if self.elev_min > self.elev_max:
            raise ValueError("lidar elev_min must not exceed elev_max")
        if self.rate_hz <= 0.0:
            raise ValueError("lidar rate_hz must be > 0")

    @property
    def n_azimuth(self) -> int:
        return int(math.ceil(2.0 * math.pi / self.azimuth_step - 1e-9))


@dataclass(frozen=True)
class OrientedBox:
    center: Vec3
    extent: Tuple[float, float, float]
    yaw: float = 0.0

    @classmethod
    def of_actor(cls, actor: ActorState) -> "OrientedBox":
        return cls(Vec3(*actor.box_center), actor.extent, actor.pose.yaw)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Points in a declared frame: ("body", actor_id) or ("world", None)."""
    frame: Tuple[str, Optional[int]]
    points: np.ndarray
    t: float

    def __len__(self) -> int:
        return int(self.points.shape[0])

    def subset(self, mask_or_idx) -> "PointCloud":
        return PointCloud(self.frame, self.points[mask_or_idx], self.t)


# ---------------- geometry kernel ----------------
def ray_box_intersect(origin: Vec3, direction: Vec3, box: OrientedBox) -> Optional[float]:
    """Entry distance of a ray into an oriented box (slab method), or None."""
    t = _slab_entry(np.asarray(origin, dtype=float), np.asarray([direction], dtype=float),
                    np.asarray(box.center, dtype=float), np.asarray(box.extent, dtype=float), box.yaw)[0]
    return None if not math.isfinite(t) else float(t)


def _slab_entry(origin: np.ndarray, dirs: np.ndarray, center: np.ndarray, extent: np.ndarray, yaw: float) -> np.ndarray:
    """Entry distances for many rays sharing one origin; inf where the ray misses."""
    c, s = math.cos(yaw), math.sin(yaw)
    ox, oy = origin[0] - center[0], origin[1] - center[1]
    o = np.array([c * ox + s * oy, -s * ox + c * oy, origin[2] - center[2]])
    d = np.empty_like(dirs)
    d[:, 0] = c * dirs[:, 0] + s * dirs[:, 1]
    d[:, 1] = -s * dirs[:, 0] + c * dirs[:, 1]
    d[:, 2] = dirs[:, 2]
    half = 0.5 * extent

    t_near = np.full(d.shape[0], -np.inf)
    t_far = np.full(d.shape[0], np.inf)
    for k in range(3):
        dk = d[:, k]
        parallel = dk == 0.0
        inside_slab = (-half[k] <= o[k]) and (o[k] <= half[k])
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half[k] - o[k]) / dk
            t2 = (half[k] - o[k]) / dk
        lo = np.where(parallel, -np.inf if inside_slab else np.inf, np.minimum(t1, t2))
        hi = np.where(parallel, np.inf if inside_slab else -np.inf, np.maximum(t1, t2))
        t_near = np.maximum(t_near, lo)
        t_far = np.minimum(t_far, hi)

    hit = (t_near <= t_far) & (t_near > 0.0)
    return np.where(hit, t_near, np.inf)


def ray_directions(cfg: LidarConfig) -> np.ndarray:
    """(channels, n_azimuth, 3) unit vectors in the sensor's body frame."""
    if cfg.channels == 1:
        elev = np.array([cfg.elev_min])
    else:
        elev = np.linspace(cfg.elev_min, cfg.elev_max, cfg.channels)
    az = np.arange(cfg.n_azimuth) * cfg.azimuth_step
    ce, se = np.cos(elev)[:, None], np.sin(elev)[:, None]
    dirs = np.empty((cfg.channels, az.size, 3))
    dirs[..., 0] = ce * np.cos(az)[None, :]
    dirs[..., 1] = ce * np.sin(az)[None, :]
    dirs[..., 2] = np.broadcast_to(se, (cfg.channels, az.size))
    return dirs


def sensor_origin(host: ActorState, cfg: LidarConfig) -> np.ndarray:
    c, s = math.cos(host.pose.yaw), math.sin(host.pose.yaw)
    m = cfg.mount
    return np.array([host.pose.x + c * m[0] - s * m[1], host.pose.y + s * m[0] + c * m[1], host.z + m[2]])


def scan_key(seed: int, host_id: int, t: float) -> int:
    return counter_key(seed, host_id, int(round(t * 1000.0)))


# ---------------- scanning ----------------
def scan_hits(world: WorldState, host: ActorState, cfg: LidarConfig, seed: int) -> Tuple[PointCloud, np.ndarray]:
    """scan() plus, per returned point, the id of the actor hit (-1 = ground)."""
    dirs_body = ray_directions(cfg).reshape(-1, 3)
    c, s = math.cos(host.pose.yaw), math.sin(host.pose.yaw)
    dirs = np.empty_like(dirs_body)
    dirs[:, 0] = c * dirs_body[:, 0] - s * dirs_body[:, 1]
    dirs[:, 1] = s * dirs_body[:, 0] + c * dirs_body[:, 1]
    dirs[:, 2] = dirs_body[:, 2]
    origin = sensor_origin(host, cfg)

    best_t = np.full(dirs.shape[0], np.inf)
    best_id = np.full(dirs.shape[0], -1, dtype=np.int64)

    # ground plane z = 0
    if origin[2] > 0.0:
        down = dirs[:, 2] < 0.0
        best_t[down] = -origin[2] / dirs[down, 2]

    for actor in world.actors:
        if actor.id == host.id:
            continue
        l, w, h = actor.extent
        reach = math.hypot(actor.pose.x - origin[0], actor.pose.y - origin[1]) - 0.5 * math.hypot(l, w)
        if reach > cfg.max_range:
            continue
        box = OrientedBox.of_actor(actor)
        t_box = _slab_entry(origin, dirs, np.asarray(box.center), np.asarray(box.extent, dtype=float), box.yaw)
        closer = t_box < best_t
        best_t[closer] = t_box[closer]
        best_id[closer] = actor.id

    valid = best_t <= cfg.max_range
    rng = best_t
    if cfg.range_noise_sigma > 0.0:
        noise = counter_normal_array(scan_key(seed, host.id, world.t), best_t.shape)
        rng = best_t + cfg.range_noise_sigma * np.clip(noise, -NOISE_CLIP, NOISE_CLIP)

    idx = np.nonzero(valid)[0]
    pts_world = origin[None, :] + rng[idx, None] * dirs[idx]
    pts_body = world_to_body_array(host.pose, pts_world)
    cloud = PointCloud(("body", host.id), pts_body, world.t)
    logger.debug("scan host=%s t=%.2f points=%d", host.id, world.t, len(cloud))
    return cloud, best_id[idx]


def scan(world: WorldState, host: ActorState, cfg: LidarConfig, seed: int) -> PointCloud:
    return scan_hits(world, host, cfg, seed)[0]


# ---------------- cloud sidecar ----------------
def encode_cloud(cloud: PointCloud) -> bytes:
    pts = np.ascontiguousarray(cloud.points, dtype="<f4")
    return CLOUD_HEADER.pack(CLOUD_MAGIC, float(cloud.t), int(pts.shape[0])) + pts.tobytes()


def write_cloud(path: str, cloud: PointCloud) -> None:
    with open(path, "wb") as f:
        f.write(encode_cloud(cloud))


def read_cloud(path: str, frame: Tuple[str, Optional[int]] = ("body", None)) -> PointCloud:
    with open(path, "rb") as f:
        data = f.read()
    magic, t, n = CLOUD_HEADER.unpack_from(data, 0)
    if magic != CLOUD_MAGIC:
        raise ValueError(f"{path}: not a point cloud file")
    pts = np.frombuffer(data, dtype="<f4", count=3 * n, offset=CLOUD_HEADER.size).reshape(n, 3)
    return PointCloud(frame, pts.astype(float), t)
