# tools/world.py
"""
Ground-truth world: actors with capability classes moving along waypoint
polylines at constant per-segment speed, advanced on a fixed-step clock.

Positions are evaluated from the integer step index (t = k * dt), never from
accumulated floats, so two runs of the same scenario are bit-identical.
"""

import math
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Any, Dict, Iterator, List, Optional, Tuple

from tools.geo import Pose2
from utils.errors import DomainError

if TYPE_CHECKING:
    from tools.scenario import Scenario

logger = logging.getLogger(__name__)


class ActorClass(str, Enum):
    CAR = "Car"
    TRUCK = "Truck"
    PEDESTRIAN = "Pedestrian"


class Capability(str, Enum):
    NO_SENSING = "NoSensing"
    CONNECTED = "Connected"
    CONNECTED_WITH_SENSORS = "ConnectedWithSensors"

    @property
    def connected(self) -> bool:
        return self is not Capability.NO_SENSING


@dataclass(frozen=True)
class ActorSpec:
    """Initial state and route of one actor as declared by the scenario."""
    id: int
    actor_class: ActorClass
    capability: Capability
    extent: Tuple[float, float, float]
    waypoints: Tuple[Tuple[float, float], ...]
    speeds: Tuple[float, ...]
    z: float = 0.0
    start_time: float = 0.0
    yaw: float = 0.0
    _lengths: Tuple[float, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        lengths = []
        for (x0, y0), (x1, y1) in zip(self.waypoints[:-1], self.waypoints[1:]):
            lengths.append(math.hypot(x1 - x0, y1 - y0))
        object.__setattr__(self, "_lengths", tuple(lengths))

    def segment_speed(self, i: int) -> float:
        if not self.speeds:
            return 0.0
        return self.speeds[min(i, len(self.speeds) - 1)]

    @property
    def route_length(self) -> float:
        return sum(self._lengths)


@dataclass(frozen=True)
class ActorState:
    id: int
    actor_class: ActorClass
    capability: Capability
    pose: Pose2
    z: float
    speed: float
    accel: float
    extent: Tuple[float, float, float]

    @property
    def box_center(self) -> Tuple[float, float, float]:
        return (self.pose.x, self.pose.y, self.z + 0.5 * self.extent[2])


@dataclass(frozen=True)
class WorldState:
    t: float
    step_index: int
    actors: Tuple[ActorState, ...]

    def actor(self, actor_id: int) -> Optional[ActorState]:
        for a in self.actors:
            if a.id == actor_id:
                return a
        return None


def load_scenario(doc: Any) -> "Scenario":
    """Parse and validate a scenario document (JSON text, dict or file path)."""
    from tools.scenario import load_scenario_doc
    return load_scenario_doc(doc)


# ---------------- motion ----------------
def _route_position(spec: ActorSpec, t: float) -> Tuple[float, float, float, float]:
    """(x, y, yaw, speed) of an actor at absolute time t."""
    wps = spec.waypoints
    yaw = spec.yaw
    if len(wps) == 1:
        return wps[0][0], wps[0][1], yaw, 0.0

    # yaw before moving: first non-degenerate segment direction
    for (x0, y0), (x1, y1), L in zip(wps[:-1], wps[1:], spec._lengths):
        if L > 0.0:
            yaw = math.atan2(y1 - y0, x1 - x0)
            break

    tau = t - spec.start_time
    if tau < 0.0:
        return wps[0][0], wps[0][1], yaw, 0.0

    for i, L in enumerate(spec._lengths):
        (x0, y0), (x1, y1) = wps[i], wps[i + 1]
        if L <= 0.0:
            continue
        yaw = math.atan2(y1 - y0, x1 - x0)
        v = spec.segment_speed(i)
        if v <= 0.0:
            return x0, y0, yaw, 0.0
        seg_time = L / v
        if tau < seg_time:
            f = (tau * v) / L
            return x0 + f * (x1 - x0), y0 + f * (y1 - y0), yaw, v
        tau -= seg_time
    # past the final waypoint
    x, y = wps[-1]
    return x, y, yaw, 0.0


def actor_state_at(spec: ActorSpec, t: float, prev_speed: Optional[float] = None, dt: float = 0.0) -> ActorState:
    x, y, yaw, v = _route_position(spec, t)
    accel = 0.0
    if prev_speed is not None and dt > 0.0:
        accel = (v - prev_speed) / dt
    return ActorState(
        id=spec.id,
        actor_class=spec.actor_class,
        capability=spec.capability,
        pose=Pose2(x, y, yaw),
        z=spec.z,
        speed=v,
        accel=accel,
        extent=spec.extent,
    )


def initial_state(scenario: "Scenario") -> WorldState:
    actors = tuple(actor_state_at(a, 0.0) for a in scenario.actors)
    return WorldState(t=0.0, step_index=0, actors=actors)


def step(state: WorldState, scenario: "Scenario") -> WorldState:
    k = state.step_index + 1
    if k > scenario.n_steps:
        raise DomainError(f"step {k} beyond scenario duration {scenario.duration}s")
    t = k * scenario.dt
    prev = {a.id: a.speed for a in state.actors}
    actors = tuple(actor_state_at(a, t, prev.get(a.id), scenario.dt) for a in scenario.actors)
    return WorldState(t=t, step_index=k, actors=actors)


def simulate(scenario: "Scenario") -> Iterator[WorldState]:
    """Every WorldState from t = 0 to t = duration, inclusive."""
    state = initial_state(scenario)
    yield state
    while state.step_index < scenario.n_steps:
        state = step(state, scenario)
        yield state


def actor_summary(state: WorldState) -> List[Dict[str, Any]]:
    """JSON-friendly ground-truth snapshot for traces."""
    out = []
    for a in state.actors:
        out.append({
            "id": a.id,
            "class": a.actor_class.value,
            "capability": a.capability.value,
            "x": a.pose.x,
            "y": a.pose.y,
            "yaw": a.pose.yaw,
            "speed": a.speed,
            "extent": list(a.extent),
        })
    return out
