# tools/scenario.py
"""
Scenario document schema and loader.

A scenario is a JSON document; parameter blocks (lidar, perception, tracker,
channel, collab) are merged key by key over data/defaults.json. Unknown keys
are rejected at every level and reported with their dotted path.
"""

import os
import json
import math
import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from tools.collab import LOCAL_ENTITY_BASE, CollabConfig
from tools.geo import GeoOrigin, Vec3
from tools.lidar import LidarConfig
from tools.perception import PerceptionConfig, Roi
from tools.tracking import TrackerParams
from tools.v2x import ChannelConfig
from tools.world import ActorClass, ActorSpec, Capability
from utils.errors import DomainError, ScenarioError
from utils.helpers import DATA_DIR, load_json

logger = logging.getLogger(__name__)

DEFAULTS_PATH = os.path.join(DATA_DIR, "defaults.json")
SCENARIO_DIR = os.path.join(DATA_DIR, "scenarios")

FALLBACK_DEFAULTS: Dict[str, Any] = {
    "lidar": {
        "channels": 16, "elev_min_deg": -15.0, "elev_max_deg": 1.0, "azimuth_step_deg": 0.4,
        "max_range": 80.0, "range_noise_sigma": 0.02, "mount": [0.0, 0.0, 1.6], "rate_hz": 10.0,
    },
    "perception": {
        "roi": {"x": [-40.0, 40.0], "y": [-40.0, 40.0], "z": [-0.5, 3.5]},
        "ransac_iters": 100, "ransac_inlier_dist": 0.2, "ransac_refine": True,
        "cluster_eps": 0.7, "cluster_min_pts": 5, "min_box_extent": 0.2,
    },
    "tracker": {
        "q": 1.0, "r_lidar": [[0.25, 0.0], [0.0, 0.25]], "r_bsm_pos": [[1.0, 0.0], [0.0, 1.0]],
        "gate_gamma": 9.21, "p_detect": 0.9, "clutter_density": 0.0001,
        "confirm_m": 2, "confirm_n": 3, "delete_k": 5, "init_p": [1.0, 1.0, 25.0, 25.0],
    },
    "channel": {"latency_base": 0.02, "latency_jitter": 0.01, "loss_prob": 0.02, "range_limit": 300.0, "seed": 0},
    "collab": {"dedup_radius": 3.0, "staleness": 0.5, "relevance_radius": 100.0, "match_dist": 2.0,
               "suppress_connected": True},
}


def load_defaults() -> Dict[str, Any]:
    return load_json(DEFAULTS_PATH, FALLBACK_DEFAULTS)


# ---------------- schema ----------------
class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class OriginModel(_Strict):
    lat: float
    lon: float
    alt: float = 0.0


class ActorModel(_Strict):
    id: int = Field(ge=0)
    actor_class: ActorClass = Field(alias="class")
    capability: Capability
    extent: Tuple[float, float, float]
    waypoints: List[Tuple[float, float]] = Field(min_length=1)
    speed: Union[float, List[float]] = 0.0
    start_time: float = Field(default=0.0, ge=0.0)
    z: float = 0.0
    yaw: float = 0.0  # degrees; used while the actor has no segment to face along

    @field_validator("id")
    @classmethod
    def _below_entity_namespaces(cls, v: int) -> int:
        if v >= LOCAL_ENTITY_BASE:
            raise ValueError(f"actor ids must be below {LOCAL_ENTITY_BASE} (track and proxy id namespaces)")
        return v

    @field_validator("extent")
    @classmethod
    def _positive_extent(cls, v):
        if any(not math.isfinite(e) or e <= 0.0 for e in v):
            raise ValueError("extent components must be > 0")
        return v

    @field_validator("speed")
    @classmethod
    def _non_negative_speed(cls, v):
        values = v if isinstance(v, list) else [v]
        if not values or any(not math.isfinite(s) or s < 0.0 for s in values):
            raise ValueError("speed must be >= 0")
        return v


class LidarModel(_Strict):
    channels: int = Field(ge=1)
    elev_min_deg: float
    elev_max_deg: float
    azimuth_step_deg: float = Field(gt=0.0, le=360.0)
    max_range: float = Field(gt=0.0)
    range_noise_sigma: float = Field(ge=0.0)
    mount: Tuple[float, float, float]
    rate_hz: float = Field(gt=0.0)


class RoiModel(_Strict):
    x: Tuple[float, float]
    y: Tuple[float, float]
    z: Tuple[float, float]


class PerceptionModel(_Strict):
    roi: RoiModel
    ransac_iters: int = Field(ge=1)
    ransac_inlier_dist: float = Field(gt=0.0)
    ransac_refine: bool
    cluster_eps: float = Field(gt=0.0)
    cluster_min_pts: int = Field(ge=1)
    min_box_extent: float = Field(gt=0.0)


class TrackerModel(_Strict):
    q: float = Field(ge=0.0)
    r_lidar: Tuple[Tuple[float, float], Tuple[float, float]]
    r_bsm_pos: Tuple[Tuple[float, float], Tuple[float, float]]
    gate_gamma: float = Field(gt=0.0)
    p_detect: float = Field(gt=0.0, le=1.0)
    clutter_density: float = Field(ge=0.0)
    confirm_m: int = Field(ge=1)
    confirm_n: int = Field(ge=1)
    delete_k: int = Field(ge=1)
    init_p: Tuple[float, float, float, float]


class ChannelModel(_Strict):
    latency_base: float = Field(ge=0.0)
    latency_jitter: float = Field(ge=0.0)
    loss_prob: float = Field(ge=0.0, le=1.0)
    range_limit: float = Field(gt=0.0)
    seed: int = Field(ge=0)


class CollabModel(_Strict):
    dedup_radius: float = Field(gt=0.0)
    staleness: float = Field(gt=0.0)
    relevance_radius: float = Field(gt=0.0)
    match_dist: float = Field(gt=0.0)
    suppress_connected: bool


class ScenarioModel(_Strict):
    name: str = ""
    description: str = ""
    origin: OriginModel
    dt: float = Field(gt=0.0)
    duration: float = Field(gt=0.0)
    host_id: int
    actors: List[ActorModel] = Field(min_length=1)
    lidar: LidarModel
    perception: PerceptionModel
    tracker: TrackerModel
    channel: ChannelModel
    collab: CollabModel


# ---------------- validated scenario ----------------
@dataclass(frozen=True)
class Scenario:
    origin: GeoOrigin
    dt: float
    duration: float
    n_steps: int
    host_id: int
    actors: Tuple[ActorSpec, ...]
    lidar: LidarConfig
    perception: PerceptionConfig
    tracker: TrackerParams
    channel: ChannelConfig
    collab: CollabConfig
    name: str = ""
    description: str = ""

    def actor_spec(self, actor_id: int) -> Optional[ActorSpec]:
        for a in self.actors:
            if a.id == actor_id:
                return a
        return None

    @property
    def sensing_ids(self) -> List[int]:
        return sorted(a.id for a in self.actors if a.capability is Capability.CONNECTED_WITH_SENSORS)

    @property
    def connected_ids(self) -> List[int]:
        return sorted(a.id for a in self.actors if a.capability.connected)


def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def _dotted(loc: Tuple[Any, ...]) -> str:
    path = ""
    for part in loc:
        if isinstance(part, int):
            path += f"[{part}]"
        else:
            path += f".{part}" if path else str(part)
    return path


def _read_document(doc: Any) -> Dict[str, Any]:
    if isinstance(doc, dict):
        return doc
    if isinstance(doc, os.PathLike) or (isinstance(doc, str) and not doc.lstrip().startswith("{")):
        path = os.fspath(doc)
        if not os.path.exists(path):
            raise ScenarioError(f"scenario file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            doc = f.read()
    try:
        data = json.loads(doc)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"invalid JSON: {e.msg} (line {e.lineno}, column {e.colno})") from e
    if not isinstance(data, dict):
        raise ScenarioError("scenario document must be a JSON object")
    return data


def _actor_spec(m: ActorModel) -> ActorSpec:
    speeds = tuple(float(s) for s in (m.speed if isinstance(m.speed, list) else [m.speed]))
    return ActorSpec(
        id=m.id,
        actor_class=m.actor_class,
        capability=m.capability,
        extent=tuple(float(e) for e in m.extent),
        waypoints=tuple((float(x), float(y)) for x, y in m.waypoints),
        speeds=speeds,
        z=m.z,
        start_time=m.start_time,
        yaw=math.radians(m.yaw),
    )


def _check_references(model: ScenarioModel) -> None:
    seen = {}
    for i, a in enumerate(model.actors):
        if a.id in seen:
            raise ScenarioError(f"duplicate actor id {a.id} (first at actors[{seen[a.id]}])", f"actors[{i}].id")
        seen[a.id] = i
        segments = max(1, len(a.waypoints) - 1)
        if isinstance(a.speed, list) and len(a.speed) > segments:
            raise ScenarioError(f"{len(a.speed)} speeds for {segments} segment(s)", f"actors[{i}].speed")
    host = next((a for a in model.actors if a.id == model.host_id), None)
    if host is None:
        raise ScenarioError(f"host_id {model.host_id} is not among the actors", "host_id")
    if host.capability is not Capability.CONNECTED_WITH_SENSORS:
        raise ScenarioError("host must be ConnectedWithSensors", "host_id")
    if model.duration < model.dt:
        raise ScenarioError("duration must be >= dt", "duration")


def _build(model: ScenarioModel) -> Scenario:
    try:
        origin = GeoOrigin(model.origin.lat, model.origin.lon, model.origin.alt)
    except DomainError as e:
        raise ScenarioError(str(e), "origin.lat") from e

    blocks = {}
    try:
        lm = model.lidar
        blocks["lidar"] = LidarConfig(
            channels=lm.channels,
            elev_min=math.radians(lm.elev_min_deg),
            elev_max=math.radians(lm.elev_max_deg),
            azimuth_step=math.radians(lm.azimuth_step_deg),
            max_range=lm.max_range,
            range_noise_sigma=lm.range_noise_sigma,
            mount=Vec3(*lm.mount),
            rate_hz=lm.rate_hz,
        )
        pm = model.perception
        blocks["perception"] = PerceptionConfig(
            roi=Roi(tuple(pm.roi.x), tuple(pm.roi.y), tuple(pm.roi.z)),
            ransac_iters=pm.ransac_iters,
            ransac_inlier_dist=pm.ransac_inlier_dist,
            ransac_refine=pm.ransac_refine,
            cluster_eps=pm.cluster_eps,
            cluster_min_pts=pm.cluster_min_pts,
            min_box_extent=pm.min_box_extent,
        )
        blocks["tracker"] = TrackerParams(**model.tracker.model_dump())
        blocks["channel"] = ChannelConfig(**model.channel.model_dump())
        blocks["collab"] = CollabConfig(**model.collab.model_dump())
    except ValueError as e:
        block = next(k for k in ("lidar", "perception", "tracker", "channel", "collab") if k not in blocks)
        raise ScenarioError(str(e), block) from e

    n_steps = int(round(model.duration / model.dt))
    if abs(n_steps * model.dt - model.duration) > 1e-9 * max(1.0, model.duration):
        logger.warning("duration %.6f is not a multiple of dt %.6f; running %d steps", model.duration, model.dt, n_steps)

    return Scenario(
        origin=origin,
        dt=model.dt,
        duration=model.duration,
        n_steps=n_steps,
        host_id=model.host_id,
        actors=tuple(_actor_spec(a) for a in model.actors),
        name=model.name,
        description=model.description,
        **blocks,
    )


def load_scenario_doc(doc: Any) -> Scenario:
    """Scenario from JSON text, an already parsed dict, or a file path."""
    data = _read_document(doc)
    defaults = load_defaults()
    merged = dict(data)
    for block in ("lidar", "perception", "tracker", "channel", "collab"):
        override = data.get(block, {})
        merged[block] = _deep_merge(defaults.get(block, {}), override) if isinstance(override, dict) else override
    try:
        model = ScenarioModel.model_validate(merged)
    except ValidationError as e:
        first = e.errors()[0]
        raise ScenarioError(first["msg"], _dotted(tuple(first["loc"]))) from e
    _check_references(model)
    scenario = _build(model)
    logger.info("scenario %s loaded: %d actors, %d steps of %.3fs",
                scenario.name or "<unnamed>", len(scenario.actors), scenario.n_steps, scenario.dt)
    return scenario


def shipped_scenario(name: str) -> str:
    """Path of a scenario shipped under data/scenarios."""
    return os.path.join(SCENARIO_DIR, f"{name}.scenario.json")
