# tools/collab.py
"""
Collaborative perception at a host:
- proxy BSMs for what a perceiving vehicle tracks (body/world -> lat/lon)
- ingestion of received Self/Proxy BSMs (staleness, dedup)
- fusion of local LiDAR tracks, Self-BSM entities and proxy-BSM tracks
- awareness report against ground truth
"""

import math
import logging
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from tools.geo import GeoOrigin, Vec3, body_to_world, rotate_xy, yaw_to_heading_deg
from tools.tracking import Measurement, Source, Track, Tracker, TrackerParams
from tools.v2x import Bsm, BsmSource, build_bsm, decode_position
from tools.world import ActorState, Capability, WorldState
from utils.errors import EncodeError

logger = logging.getLogger(__name__)

PROXY_ID_BASE = 4_000_000_000
LOCAL_ENTITY_BASE = 1_000_000_000
PROXY_ENTITY_BASE = 2_000_000_000
MIN_HEADING_SPEED = 0.1


@dataclass(frozen=True)
class CollabConfig:
    dedup_radius: float = 3.0
    staleness: float = 0.5
    relevance_radius: float = 100.0
    match_dist: float = 2.0
    suppress_connected: bool = True

    def __post_init__(self):
        for name in ("dedup_radius", "staleness", "relevance_radius", "match_dist"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be > 0")


@dataclass(frozen=True, order=True)
class Provenance:
    kind: str  # LocalTrack | SelfBsm | ProxyBsm
    id: int

    def label(self) -> str:
        return f"{self.kind}({self.id})"


@dataclass(frozen=True)
class FusedEntity:
    entity_id: int
    position: Vec3
    velocity: Tuple[float, float]
    provenance: FrozenSet[Provenance]
    last_update: float

    def to_dict(self) -> dict:
        return {
            "entity_id": self.entity_id,
            "position": [self.position[0], self.position[1], self.position[2]],
            "velocity": list(self.velocity),
            "provenance": [p.label() for p in sorted(self.provenance)],
            "last_update": self.last_update,
        }


@dataclass(frozen=True)
class AwarenessReport:
    t: float
    relevant_ids: FrozenSet[int]
    perceivable_ids: FrozenSet[int]
    awareness_ratio: float
    per_id_provenance: Dict[int, FrozenSet[Provenance]] = field(default_factory=dict)
    phantoms: int = 0

    def to_dict(self) -> dict:
        return {
            "relevant": sorted(self.relevant_ids),
            "perceivable": sorted(self.perceivable_ids),
            "ratio": self.awareness_ratio,
            "phantoms": self.phantoms,
            "provenance": {str(k): [p.label() for p in sorted(v)] for k, v in sorted(self.per_id_provenance.items())},
        }


def proxy_subject_id(sender_id: int, track_id: int) -> int:
    return PROXY_ID_BASE + sender_id * 1000 + track_id


def track_world_state(track: Track, host: ActorState) -> Tuple[Vec3, Tuple[float, float]]:
    """World position and velocity of a track, whatever frame it is kept in."""
    px, py, vx, vy = (float(v) for v in track.x)
    if track.frame == "body":
        p = body_to_world(host.pose, Vec3(px, py, 0.0))
        wvx, wvy = rotate_xy(host.pose.yaw, vx, vy)
        hvx, hvy = rotate_xy(host.pose.yaw, host.speed, 0.0)
        return Vec3(p.x, p.y, host.z), (wvx + hvx, wvy + hvy)
    return Vec3(px, py, 0.0), (vx, vy)


# ---------------- proxy messages ----------------
def proxy_bsms(host: ActorState, tracks: Sequence[Track], t: float, origin: GeoOrigin,
               known_positions: Optional[Iterable[Tuple[float, float]]] = None,
               dedup_radius: float = 3.0) -> List[Bsm]:
    if host.capability is not Capability.CONNECTED_WITH_SENSORS:
        raise ValueError(f"actor {host.id} cannot generate proxy messages")
    known = list(known_positions or [])
    out = []
    for trk in tracks:
        if not trk.confirmed:
            continue
        pos, (vx, vy) = track_world_state(trk, host)
        if any(math.hypot(pos.x - kx, pos.y - ky) <= dedup_radius for kx, ky in known):
            continue
        speed = math.hypot(vx, vy)
        heading = yaw_to_heading_deg(math.atan2(vy, vx)) if speed >= MIN_HEADING_SPEED else 0.0
        try:
            out.append(build_bsm(proxy_subject_id(host.id, trk.track_id), host.id, BsmSource.PROXY,
                                 t, pos, speed, heading, 0.0, origin))
        except EncodeError as e:
            logger.warning("proxy message for track %d of %d skipped: %s", trk.track_id, host.id, e)
    return out


# ---------------- fusion state ----------------
@dataclass
class SelfEntry:
    position: Vec3
    velocity: Tuple[float, float]
    t_msg: float

    def at(self, t: float) -> Vec3:
        dt = t - self.t_msg
        return Vec3(self.position.x + self.velocity[0] * dt, self.position.y + self.velocity[1] * dt, self.position.z)


class FusionState:
    """One host's view of the world assembled from its sensors and received BSMs."""

    def __init__(self, host_id: int, origin: GeoOrigin, params: TrackerParams, cfg: CollabConfig):
        self.host_id = host_id
        self.origin = origin
        self.params = params
        self.cfg = cfg
        self.self_entries: Dict[int, SelfEntry] = {}
        self.proxy_tracker = Tracker(params, frame="world", name=f"proxy-{host_id}")
        self.pending: List[Measurement] = []
        self.host: Optional[ActorState] = None
        self.local_positions: List[Tuple[float, float]] = []
        self.counters = {"stale": 0, "duplicate_proxy": 0, "self_bsm": 0, "proxy_bsm": 0}

    def observe_local(self, host: ActorState, local_tracks: Sequence[Track]) -> None:
        self.host = host
        self.local_positions = []
        for trk in local_tracks:
            pos, _ = track_world_state(trk, host)
            self.local_positions.append((pos.x, pos.y))

    def self_positions(self, t: float) -> List[Tuple[float, float]]:
        return [(e.at(t).x, e.at(t).y) for _, e in sorted(self.self_entries.items())]

    def _is_duplicate(self, x: float, y: float, t: float) -> bool:
        r = self.cfg.dedup_radius
        refs = self.self_positions(t) + self.local_positions
        if self.host is not None:
            refs.append((self.host.pose.x, self.host.pose.y))
        return any(math.hypot(x - rx, y - ry) <= r for rx, ry in refs)

    def expire(self, t: float) -> None:
        for vid in [v for v, e in self.self_entries.items() if t - e.t_msg > self.cfg.staleness]:
            del self.self_entries[vid]


def ingest_bsms(state: FusionState, received: Sequence[Bsm], origin: GeoOrigin, t: float) -> None:
    fresh = []
    for b in received:
        if t - b.t > state.cfg.staleness:
            state.counters["stale"] += 1
            logger.debug("host %d ignored stale BSM from %d (age %.3fs)", state.host_id, b.sender_id, t - b.t)
            continue
        fresh.append(b)

    for b in sorted((b for b in fresh if b.source is BsmSource.SELF), key=lambda b: (b.t_ms, b.subject_id)):
        prev = state.self_entries.get(b.subject_id)
        if prev is not None and prev.t_msg > b.t:
            continue
        pos, vel = decode_position(b, origin)
        state.self_entries[b.subject_id] = SelfEntry(pos, vel, b.t)
        state.counters["self_bsm"] += 1

    for b in sorted((b for b in fresh if b.source is BsmSource.PROXY), key=lambda b: (b.t_ms, b.sender_id, b.subject_id)):
        pos, (vx, vy) = decode_position(b, origin)
        age = t - b.t
        x, y = pos.x + vx * age, pos.y + vy * age
        if state._is_duplicate(x, y, t):
            state.counters["duplicate_proxy"] += 1
            continue
        state.counters["proxy_bsm"] += 1
        state.pending.append(Measurement(z=np.array([x, y]), R=state.params.R_bsm,
                                         source=Source("bsm", b.subject_id), t=t, sender_id=b.sender_id,
                                         velocity=np.array([vx, vy])))


def _nearest(entities: Dict[int, dict], x: float, y: float, radius: float) -> Optional[int]:
    best, best_d = None, radius
    for eid in sorted(entities):
        e = entities[eid]
        d = math.hypot(e["position"].x - x, e["position"].y - y)
        if d <= best_d:
            best, best_d = eid, d
    return best


def local_entities(local_tracks: Sequence[Track], host: ActorState, t: float) -> List[FusedEntity]:
    """Entities a host knows from its own range sensor only."""
    out = []
    for trk in sorted(local_tracks, key=lambda k: k.track_id):
        pos, vel = track_world_state(trk, host)
        out.append(FusedEntity(LOCAL_ENTITY_BASE + trk.track_id, pos, vel,
                               frozenset([Provenance("LocalTrack", trk.track_id)]), t))
    return out


def fuse(state: FusionState, local_tracks: Sequence[Track], t: float) -> List[FusedEntity]:
    """
    Sequential per-sensor fusion. The LiDAR pass is the host's local tracker
    (already stepped with this scan's detections); the BSM pass runs the
    proxy-message tracker on what ingest_bsms queued for t. Results are then
    merged with the ID-keyed Self-BSM entities by dedup_radius.
    """
    measurements, state.pending = state.pending, []
    proxy_tracks = state.proxy_tracker.step(measurements, t)
    state.expire(t)

    entities: Dict[int, dict] = {}
    for vid, entry in sorted(state.self_entries.items()):
        entities[vid] = {"position": entry.at(t), "velocity": entry.velocity,
                         "provenance": {Provenance("SelfBsm", vid)}, "last_update": entry.t_msg}

    host = state.host
    for trk in sorted(local_tracks, key=lambda k: k.track_id):
        pos, vel = track_world_state(trk, host) if host is not None else (Vec3(*trk.x[:2], 0.0), tuple(trk.x[2:]))
        tag = Provenance("LocalTrack", trk.track_id)
        eid = _nearest({k: v for k, v in entities.items() if k < LOCAL_ENTITY_BASE}, pos.x, pos.y, state.cfg.dedup_radius)
        if eid is not None:
            entities[eid]["provenance"].add(tag)
            entities[eid]["last_update"] = t
            continue
        entities[LOCAL_ENTITY_BASE + trk.track_id] = {"position": pos, "velocity": (float(vel[0]), float(vel[1])),
                                                      "provenance": {tag}, "last_update": t}

    for trk in sorted(proxy_tracks, key=lambda k: k.track_id):
        x, y, vx, vy = (float(v) for v in trk.x)
        tags = {Provenance("ProxyBsm", s) for s in sorted(trk.senders)}
        eid = _nearest(entities, x, y, state.cfg.dedup_radius)
        if eid is not None:
            entities[eid]["provenance"] |= tags
            continue
        entities[PROXY_ENTITY_BASE + trk.track_id] = {"position": Vec3(x, y, 0.0), "velocity": (vx, vy),
                                                      "provenance": tags, "last_update": t}

    return [FusedEntity(eid, e["position"], (float(e["velocity"][0]), float(e["velocity"][1])),
                        frozenset(e["provenance"]), e["last_update"])
            for eid, e in sorted(entities.items())]


# ---------------- awareness ----------------
def footprint_distance(actor: ActorState, x: float, y: float) -> float:
    """Ground-plane distance from (x, y) to the actor's oriented box; 0 inside it."""
    c, s = math.cos(actor.pose.yaw), math.sin(actor.pose.yaw)
    dx, dy = x - actor.pose.x, y - actor.pose.y
    along, across = c * dx + s * dy, -s * dx + c * dy
    out_l = max(abs(along) - 0.5 * actor.extent[0], 0.0)
    out_w = max(abs(across) - 0.5 * actor.extent[1], 0.0)
    return math.hypot(out_l, out_w)


def match_entities(host: ActorState, fused: Sequence[FusedEntity], world: WorldState,
                   match_dist: float = 2.0) -> List[Optional[int]]:
    """Ground-truth actor whose footprint is nearest each entity within match_dist, or None."""
    actors = [a for a in world.actors if a.id != host.id]
    out = []
    for e in fused:
        best, best_d = None, match_dist
        for a in actors:
            d = footprint_distance(a, e.position[0], e.position[1])
            if d < best_d or (d == best_d and best is None):
                best, best_d = a.id, d
        out.append(best)
    return out


def awareness(host: ActorState, fused: Sequence[FusedEntity], world: WorldState, radius: float = 100.0,
              match_dist: float = 2.0) -> AwarenessReport:
    relevant = frozenset(a.id for a in world.actors
                         if a.id != host.id and math.hypot(a.pose.x - host.pose.x, a.pose.y - host.pose.y) <= radius)
    provenance: Dict[int, set] = {}
    phantoms = 0
    for e, aid in zip(fused, match_entities(host, fused, world, match_dist)):
        if aid is None:
            phantoms += 1
            continue
        provenance.setdefault(aid, set()).update(e.provenance)
    perceivable = frozenset(provenance)
    ratio = len(perceivable & relevant) / len(relevant) if relevant else 1.0
    return AwarenessReport(world.t, relevant, perceivable, ratio,
                           {k: frozenset(v) for k, v in sorted(provenance.items())}, phantoms)
