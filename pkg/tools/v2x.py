# tools/v2x.py
"""
Basic Safety Message (Part I subset) codec and a lossy broadcast channel.

Wire record, 39 bytes little-endian:
  magic "BSM1" | version<<4 | source | sender u32 | subject u32 | t_ms u64 |
  lat i32 (1e-7 deg) | lon i32 (1e-7 deg) | elev i32 (0.1 m) |
  speed u16 (0.02 m/s) | heading u16 (0.0125 deg, clockwise from north) |
  accel i16 (0.01 m/s^2)

Field resolutions follow the J2735 data elements; the layout itself is local
to this simulator (no ASN.1).
"""

import json
import math
import heapq
import struct
import logging
from dataclasses import asdict, dataclass
from enum import IntEnum
from typing import Any, Dict, List, Optional, Sequence, Tuple

from tools.geo import GeoOrigin, Vec3, enu_to_lla, lla_to_enu, heading_deg_to_yaw, yaw_to_heading_deg
from tools.world import ActorState, Capability
from utils.errors import DecodeError, EncodeError
from utils.helpers import counter_uniform, rate_due

logger = logging.getLogger(__name__)

BSM_MAGIC = b"BSM1"
BSM_VERSION = 1
BSM_STRUCT = struct.Struct("<4sBIIQiiiHHh")
BSM_SIZE = BSM_STRUCT.size  # 39
BSM_RATE_HZ = 10.0

LATLON_SCALE = 1e7
ELEV_SCALE = 10.0
SPEED_SCALE = 50.0
HEADING_SCALE = 80.0
ACCEL_SCALE = 100.0
HEADING_MODULUS = 28800

U16, U32, U64 = 0xFFFF, 0xFFFFFFFF, 0xFFFFFFFFFFFFFFFF
I16 = (-0x8000, 0x7FFF)
I32 = (-0x80000000, 0x7FFFFFFF)


class BsmSource(IntEnum):
    SELF = 0
    PROXY = 1


@dataclass(frozen=True)
class Bsm:
    subject_id: int
    sender_id: int
    source: BsmSource
    t_ms: int
    lat_q: int
    lon_q: int
    elev_q: int
    speed_q: int
    heading_q: int
    accel_q: int

    @property
    def t(self) -> float:
        return self.t_ms / 1000.0

    @property
    def lat(self) -> float:
        return self.lat_q / LATLON_SCALE

    @property
    def lon(self) -> float:
        return self.lon_q / LATLON_SCALE

    @property
    def elevation(self) -> float:
        return self.elev_q / ELEV_SCALE

    @property
    def speed(self) -> float:
        return self.speed_q / SPEED_SCALE

    @property
    def heading_deg(self) -> float:
        return self.heading_q / HEADING_SCALE

    @property
    def accel(self) -> float:
        return self.accel_q / ACCEL_SCALE


@dataclass(frozen=True)
class ChannelConfig:
    latency_base: float = 0.02
    latency_jitter: float = 0.01
    loss_prob: float = 0.02
    range_limit: float = 300.0
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.loss_prob <= 1.0):
            raise ValueError("loss_prob must be in [0, 1]")
        if self.latency_base < 0.0:
            raise ValueError("latency_base must be >= 0")
        if self.latency_jitter < 0.0:
            raise ValueError("latency_jitter must be >= 0")
        if self.range_limit <= 0.0:
            raise ValueError("range_limit must be > 0")


# ---------------- quantization ----------------
def quantize(value: float, scale: float) -> int:
    """Round half away from zero."""
    if not math.isfinite(value):
        raise EncodeError(f"cannot quantize non-finite value {value!r}")
    x = value * scale
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def _check_range(name: str, v: int, lo: int, hi: int) -> None:
    if not (lo <= v <= hi):
        raise EncodeError(f"{name}={v} outside [{lo}, {hi}]")


def validate_bsm(b: Bsm) -> None:
    _check_range("subject_id", b.subject_id, 0, U32)
    _check_range("sender_id", b.sender_id, 0, U32)
    _check_range("t_ms", b.t_ms, 0, U64)
    _check_range("lat_q", b.lat_q, -900000000, 900000000)
    _check_range("lon_q", b.lon_q, -1800000000, 1800000000)
    _check_range("elev_q", b.elev_q, *I32)
    _check_range("speed_q", b.speed_q, 0, U16)
    _check_range("heading_q", b.heading_q, 0, HEADING_MODULUS - 1)
    _check_range("accel_q", b.accel_q, *I16)
    if b.source not in (BsmSource.SELF, BsmSource.PROXY):
        raise EncodeError(f"unknown source {b.source!r}")


def build_bsm(subject_id: int, sender_id: int, source: BsmSource, t: float, position: Vec3,
              speed: float, heading_deg: float, accel: float, origin: GeoOrigin) -> Bsm:
    lat, lon, alt = enu_to_lla(position, origin)
    b = Bsm(
        subject_id=subject_id,
        sender_id=sender_id,
        source=source,
        t_ms=int(round(t * 1000.0)),
        lat_q=quantize(lat, LATLON_SCALE),
        lon_q=quantize(lon, LATLON_SCALE),
        elev_q=quantize(alt, ELEV_SCALE),
        speed_q=quantize(speed, SPEED_SCALE),
        heading_q=quantize(heading_deg, HEADING_SCALE) % HEADING_MODULUS,
        accel_q=quantize(accel, ACCEL_SCALE),
    )
    validate_bsm(b)
    return b


def make_self_bsm(actor: ActorState, t: float, origin: GeoOrigin) -> Bsm:
    if actor.capability is Capability.NO_SENSING:
        raise ValueError(f"actor {actor.id} has no V2X unit")
    return build_bsm(actor.id, actor.id, BsmSource.SELF, t, Vec3(actor.pose.x, actor.pose.y, actor.z),
                     actor.speed, yaw_to_heading_deg(actor.pose.yaw), actor.accel, origin)


# ---------------- codec ----------------
def encode_bsm(b: Bsm) -> bytes:
    validate_bsm(b)
    return BSM_STRUCT.pack(BSM_MAGIC, (BSM_VERSION << 4) | int(b.source), b.sender_id, b.subject_id, b.t_ms,
                           b.lat_q, b.lon_q, b.elev_q, b.speed_q, b.heading_q, b.accel_q)


def decode_bsm(data: bytes) -> Bsm:
    if len(data) != BSM_SIZE:
        raise DecodeError("length", f"expected {BSM_SIZE} bytes, got {len(data)}")
    magic, vs, sender, subject, t_ms, lat, lon, elev, speed, heading, accel = BSM_STRUCT.unpack(data)
    if magic != BSM_MAGIC:
        raise DecodeError("magic", f"bad magic {magic!r}")
    if vs >> 4 != BSM_VERSION:
        raise DecodeError("version", f"unsupported version {vs >> 4}")
    try:
        source = BsmSource(vs & 0x0F)
    except ValueError:
        raise DecodeError("source", f"unknown source {vs & 0x0F}")
    if heading >= HEADING_MODULUS:
        raise DecodeError("heading", f"heading_q {heading} out of range")
    return Bsm(subject, sender, source, t_ms, lat, lon, elev, speed, heading, accel)


def decode_position(b: Bsm, origin: GeoOrigin) -> Tuple[Vec3, Tuple[float, float]]:
    """World ENU position and (vx, vy) velocity carried by a message."""
    p = lla_to_enu(b.lat, b.lon, b.elevation, origin)
    yaw = heading_deg_to_yaw(b.heading_deg)
    return p, (b.speed * math.cos(yaw), b.speed * math.sin(yaw))


def bsm_to_dict(b: Bsm) -> Dict[str, Any]:
    d = asdict(b)
    d["source"] = b.source.name
    return d


def bsm_from_dict(d: Dict[str, Any]) -> Bsm:
    fields = dict(d)
    fields["source"] = BsmSource[fields["source"]] if isinstance(fields["source"], str) else BsmSource(fields["source"])
    return Bsm(**fields)


def bsm_due(step_index: int, dt: float, rate_hz: float = BSM_RATE_HZ) -> bool:
    return rate_due(step_index, dt, rate_hz)


# ---------------- channel ----------------
class Channel:
    """
    Broadcast medium between V2X nodes.

    Each (message, receiver) pair is dropped or delayed independently, with
    draws keyed by (seed, message index, receiver id), so results do not
    depend on the order receivers are visited.
    """

    def __init__(self, cfg: ChannelConfig, run_seed: int = 0, keep_log: bool = False):
        self.cfg = cfg
        self.run_seed = run_seed
        self.nodes: Dict[int, Tuple[float, float]] = {}
        self._queues: Dict[int, List[Tuple[float, int, float, bytes]]] = {}
        self._msg_index = 0
        self._t_last = -math.inf
        self.keep_log = keep_log
        self.log: List[Dict[str, Any]] = []
        self.stats = {"messages": 0, "sent": 0, "delivered": 0, "dropped": 0, "out_of_range": 0}
        self.latencies: List[float] = []

    def set_nodes(self, positions: Dict[int, Tuple[float, float]]) -> None:
        """Register the V2X-capable nodes and their current positions."""
        self.nodes = dict(positions)
        for nid in self.nodes:
            self._queues.setdefault(nid, [])

    def _check_time(self, t: float) -> None:
        if t < self._t_last:
            raise ValueError(f"channel time went backwards: {t} < {self._t_last}")
        self._t_last = t

    def broadcast(self, msg: bytes, sender_id: int, sender_pos: Tuple[float, float], t: float) -> int:
        self._check_time(t)
        index = self._msg_index
        self._msg_index += 1
        self.stats["messages"] += 1
        cfg = self.cfg
        outcomes = {}
        for rid in sorted(self.nodes):
            if rid == sender_id:
                continue
            rx, ry = self.nodes[rid]
            if math.hypot(rx - sender_pos[0], ry - sender_pos[1]) > cfg.range_limit:
                self.stats["out_of_range"] += 1
                outcomes[rid] = "out_of_range"
                continue
            self.stats["sent"] += 1
            if counter_uniform(cfg.seed, self.run_seed, index, rid, 0) < cfg.loss_prob:
                self.stats["dropped"] += 1
                outcomes[rid] = "dropped"
                continue
            jitter = cfg.latency_jitter * (2.0 * counter_uniform(cfg.seed, self.run_seed, index, rid, 1) - 1.0)
            deliver_at = t + max(0.0, cfg.latency_base + jitter)
            heapq.heappush(self._queues[rid], (deliver_at, index, t, msg))
            outcomes[rid] = round(deliver_at - t, 6)
        if self.keep_log:
            self.log.append({"index": index, "t": t, "sender": sender_id, "bytes": msg, "outcomes": outcomes})
        return index

    def poll(self, receiver_id: int, receiver_pos: Tuple[float, float], t: float) -> List[bytes]:
        """
        Messages delivered to receiver_id by time t, in (delivery time, index)
        order. receiver_pos becomes the node position used for range checks
        of later broadcasts.
        """
        self._check_time(t)
        self.nodes[receiver_id] = (float(receiver_pos[0]), float(receiver_pos[1]))
        queue = self._queues.setdefault(receiver_id, [])
        out = []
        while queue and queue[0][0] <= t + 1e-9:
            deliver_at, index, sent_at, msg = heapq.heappop(queue)
            out.append(msg)
            self.stats["delivered"] += 1
            self.latencies.append(deliver_at - sent_at)
        return out

    @property
    def in_flight(self) -> int:
        return sum(len(q) for q in self._queues.values())

    def summary(self) -> Dict[str, Any]:
        s = dict(self.stats)
        s["in_flight"] = self.in_flight
        s["mean_latency"] = sum(self.latencies) / len(self.latencies) if self.latencies else 0.0
        return s


def write_message_log(path: str, entries: Sequence[Dict[str, Any]], fmt: Optional[str] = None) -> None:
    """Length-prefixed binary (u32 length + record) or JSONL with decoded fields."""
    fmt = fmt or ("jsonl" if path.endswith(".jsonl") else "binary")
    if fmt == "jsonl":
        with open(path, "w", encoding="utf-8") as f:
            for e in entries:
                row = {k: v for k, v in e.items() if k != "bytes"}
                row["outcomes"] = {str(k): v for k, v in sorted(e["outcomes"].items())}
                row["bsm"] = bsm_to_dict(decode_bsm(e["bytes"]))
                f.write(json.dumps(row, sort_keys=True) + "\n")
    else:
        with open(path, "wb") as f:
            for e in entries:
                f.write(struct.pack("<I", len(e["bytes"])) + e["bytes"])
