# harness.py
"""
Scenario runner: world -> lidar -> perception -> tracking -> v2x -> collab,
one trace record per simulation step, plus metrics over a finished trace.
"""

import os
import sys
import csv
import json
import math
import time
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from tqdm import tqdm

from tools.collab import (FusionState, awareness, fuse, ingest_bsms, local_entities, match_entities, proxy_bsms)
from tools.geo import Vec3, body_to_world
from tools.lidar import scan, write_cloud
from tools.perception import detect
from tools.scenario import Scenario
from tools.tracking import LIDAR, Measurement, Track, Tracker, predict
from tools.v2x import Channel, bsm_due, bsm_to_dict, decode_bsm, encode_bsm, make_self_bsm
from tools.world import ActorState, WorldState, actor_summary, initial_state, step
from utils.errors import CovsimError, DecodeError, HarnessError
from utils.helpers import counter_key, rate_due

logger = logging.getLogger(__name__)

SHOW_PROGRESS = os.getenv("COVSIM_PROGRESS", "1") != "0"
DEFAULT_WORKERS = max(1, int(os.getenv("COVSIM_WORKERS", "1") or 1))

WARMUP = 1.0
OSPA_CUTOFF = 10.0
OSPA_ORDER = 1


@dataclass
class TraceRecord:
    t: float
    step_index: int
    ground_truth: List[Dict[str, Any]]
    hosts: Dict[int, Dict[str, Any]]
    channel: Dict[str, Any]
    elapsed: float = field(default=0.0, compare=False)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "t": round(self.t, 9),
            "step": self.step_index,
            "ground_truth": self.ground_truth,
            "hosts": {str(k): v for k, v in sorted(self.hosts.items())},
            "channel": self.channel,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


@dataclass
class MetricsReport:
    steps: int
    rmse: Dict[Tuple[int, int], float]
    awareness_host_only: Dict[int, float]
    awareness_collaborative: Dict[int, float]
    phantoms: Dict[int, int]
    ospa_mean: Dict[int, float]
    bsm: Dict[str, Any]
    runtime_per_step: float = 0.0

    def rows(self, include_timing: bool = False) -> List[Tuple[str, str, str]]:
        rows = []
        for (host, actor), v in sorted(self.rmse.items()):
            rows.append((f"rmse_{actor}", str(host), f"{v:.6f}"))
        for host in sorted(self.awareness_host_only):
            rows.append(("awareness_host_only", str(host), f"{self.awareness_host_only[host]:.6f}"))
            rows.append(("awareness_collaborative", str(host), f"{self.awareness_collaborative[host]:.6f}"))
            rows.append(("phantoms", str(host), str(self.phantoms[host])))
            rows.append(("ospa_mean", str(host), f"{self.ospa_mean[host]:.6f}"))
        for key in ("sent", "delivered", "dropped", "in_flight"):
            rows.append((f"bsm_{key}", "", str(int(self.bsm.get(key, 0)))))
        rows.append(("bsm_mean_latency", "", f"{float(self.bsm.get('mean_latency', 0.0)):.6f}"))
        if include_timing:
            rows.append(("runtime_per_step", "", f"{self.runtime_per_step:.6f}"))
        return rows


# ---------------- per-host pipeline ----------------
class HostPipeline:
    """Sensing, tracking and fusion state owned by one ConnectedWithSensors actor."""

    def __init__(self, actor_id: int, scenario: Scenario):
        self.actor_id = actor_id
        self.scenario = scenario
        self.tracker = Tracker(scenario.tracker, frame="world", name=f"lidar-{actor_id}")
        self.fusion = FusionState(actor_id, scenario.origin, scenario.tracker, scenario.collab)
        self.last_cloud = None
        self.last_detections: List[Dict[str, Any]] = []

    def sense(self, world: WorldState, seed: int) -> None:
        host = world.actor(self.actor_id)
        sc = self.scenario
        try:
            cloud = scan(world, host, sc.lidar, seed)
        except CovsimError as e:
            raise HarnessError(world.step_index, "lidar", e) from e
        try:
            detections = detect(cloud, sc.perception, counter_key(seed, self.actor_id, world.step_index))
        except CovsimError as e:
            raise HarnessError(world.step_index, "perception", e) from e
        meas = []
        for d in detections:
            c = body_to_world(host.pose, Vec3(d.center[0], d.center[1], 0.0))
            meas.append(Measurement(z=np.array([c.x, c.y]), R=sc.tracker.R_lidar, source=LIDAR, t=world.t))
        try:
            self.tracker.step(meas, world.t)
        except CovsimError as e:
            raise HarnessError(world.step_index, "tracking", e) from e
        self.last_cloud = cloud
        self.last_detections = [d.to_dict() for d in detections]

    def tracks_at(self, t: float) -> List[Track]:
        """Confirmed local tracks predicted forward to t."""
        confirmed = self.tracker.confirmed()
        if self.tracker.t_last is None or t <= self.tracker.t_last:
            return confirmed
        return [predict(trk, t - self.tracker.t_last, self.scenario.tracker.q) for trk in confirmed]


class Simulation:
    """One run of a scenario with a given seed; records() yields the trace."""

    def __init__(self, scenario: Scenario, seed: int = 0, workers: Optional[int] = None,
                 keep_bsm_log: bool = False, cloud_dir: Optional[str] = None, progress: Optional[bool] = None):
        self.scenario = scenario
        self.seed = int(seed)
        self.workers = max(1, workers if workers is not None else DEFAULT_WORKERS)
        self.channel = Channel(scenario.channel, run_seed=self.seed, keep_log=keep_bsm_log)
        self.pipelines = {aid: HostPipeline(aid, scenario) for aid in scenario.sensing_ids}
        self.cloud_dir = cloud_dir
        self.progress = SHOW_PROGRESS and sys.stderr.isatty() if progress is None else progress
        if cloud_dir:
            os.makedirs(cloud_dir, exist_ok=True)

    def _broadcast(self, world: WorldState, sent: Dict[int, List[Dict[str, Any]]]) -> None:
        sc = self.scenario
        if not bsm_due(world.step_index, sc.dt):
            return
        for aid in sc.connected_ids:
            actor = world.actor(aid)
            pos = (actor.pose.x, actor.pose.y)
            messages = [make_self_bsm(actor, world.t, sc.origin)]
            pipe = self.pipelines.get(aid)
            if pipe is not None:
                known = pipe.fusion.self_positions(world.t) if sc.collab.suppress_connected else None
                messages += proxy_bsms(actor, pipe.tracks_at(world.t), world.t, sc.origin,
                                       known_positions=known, dedup_radius=sc.collab.dedup_radius)
            for b in messages:
                self.channel.broadcast(encode_bsm(b), aid, pos, world.t)
                sent.setdefault(aid, []).append(bsm_to_dict(b))

    def _receive(self, actor: ActorState, t: float) -> list:
        out = []
        for raw in self.channel.poll(actor.id, (actor.pose.x, actor.pose.y), t):
            try:
                out.append(decode_bsm(raw))
            except DecodeError as e:
                logger.warning("actor %d dropped undecodable message: %s", actor.id, e)
        return out

    def _fuse(self, world: WorldState, pipe: HostPipeline, received: list) -> Dict[str, Any]:
        sc = self.scenario
        host = world.actor(pipe.actor_id)
        local = pipe.tracks_at(world.t)
        pipe.fusion.observe_local(host, local)
        ingest_bsms(pipe.fusion, received, sc.origin, world.t)
        fused = fuse(pipe.fusion, local, world.t)
        report = awareness(host, fused, world, sc.collab.relevance_radius, sc.collab.match_dist)
        own = awareness(host, local_entities(local, host, world.t), world, sc.collab.relevance_radius,
                        sc.collab.match_dist)
        fused_rows = []
        for e, truth in zip(fused, match_entities(host, fused, world, sc.collab.match_dist)):
            row = e.to_dict()
            row["truth_id"] = truth
            fused_rows.append(row)
        return {
            "tracks": [trk.to_dict() for trk in local],
            "received": [bsm_to_dict(b) for b in received],
            "fused": fused_rows,
            "awareness": report.to_dict(),
            "awareness_host_only": own.to_dict(),
            "fusion_counters": dict(pipe.fusion.counters),
        }

    def step_record(self, world: WorldState) -> TraceRecord:
        sc = self.scenario
        k = world.step_index
        started = time.perf_counter()
        self.channel.set_nodes({a.id: (a.pose.x, a.pose.y) for a in world.actors if a.capability.connected})

        scanned = []
        if rate_due(k, sc.dt, sc.lidar.rate_hz):
            scanned = sorted(self.pipelines)
            if self.workers > 1 and len(scanned) > 1:
                with ThreadPoolExecutor(max_workers=self.workers) as pool:
                    list(pool.map(lambda aid: self.pipelines[aid].sense(world, self.seed), scanned))
            else:
                for aid in scanned:
                    self.pipelines[aid].sense(world, self.seed)
            if self.cloud_dir:
                for aid in scanned:
                    write_cloud(os.path.join(self.cloud_dir, f"host{aid}_step{k:06d}.cvs"), self.pipelines[aid].last_cloud)

        sent: Dict[int, List[Dict[str, Any]]] = {}
        try:
            self._broadcast(world, sent)
        except CovsimError as e:
            raise HarnessError(k, "v2x", e) from e

        hosts = {}
        for a in world.actors:
            if not a.capability.connected:
                continue
            received = self._receive(a, world.t)
            pipe = self.pipelines.get(a.id)
            if pipe is None:
                continue
            try:
                rec = self._fuse(world, pipe, received)
            except CovsimError as e:
                raise HarnessError(k, "collab", e) from e
            rec["scanned"] = a.id in scanned
            rec["detections"] = pipe.last_detections if a.id in scanned else []
            rec["sent"] = sent.get(a.id, [])
            hosts[a.id] = rec

        logger.debug("step %d t=%.2f scanned=%d sent=%d in_flight=%d", k, world.t, len(scanned),
                     sum(len(v) for v in sent.values()), self.channel.in_flight)
        return TraceRecord(world.t, k, actor_summary(world), hosts, self.channel.summary(),
                           elapsed=time.perf_counter() - started)

    def records(self) -> Iterator[TraceRecord]:
        sc = self.scenario
        logger.info("run %s: %d steps, seed %d, %d sensing hosts", sc.name or "<unnamed>", sc.n_steps,
                    self.seed, len(self.pipelines))
        world = initial_state(sc)
        bar = tqdm(total=sc.n_steps, desc=sc.name or "covsim", unit="step", disable=not self.progress)
        try:
            while world.step_index < sc.n_steps:
                try:
                    world = step(world, sc)
                except (CovsimError, ValueError) as e:
                    raise HarnessError(world.step_index + 1, "world", e) from e
                yield self.step_record(world)
                bar.update(1)
        finally:
            bar.close()
        logger.info("run %s finished: %s", sc.name or "<unnamed>", self.channel.summary())


def run(scenario: Scenario, seed: int = 0, workers: Optional[int] = None) -> Iterator[TraceRecord]:
    return Simulation(scenario, seed, workers=workers).records()


# ---------------- metrics ----------------
def _as_dict(record: Any) -> Dict[str, Any]:
    return record.to_dict() if isinstance(record, TraceRecord) else record


def ospa(X: Sequence[Sequence[float]], Y: Sequence[Sequence[float]], c: float = OSPA_CUTOFF, p: int = OSPA_ORDER) -> float:
    """OSPA distance between two finite point sets."""
    X = np.asarray(X, dtype=float).reshape(-1, 2)
    Y = np.asarray(Y, dtype=float).reshape(-1, 2)
    m, n = len(X), len(Y)
    if m == 0 and n == 0:
        return 0.0
    if m == 0 or n == 0:
        return float(c)
    if m > n:
        X, Y, m, n = Y, X, n, m
    D = np.minimum(np.linalg.norm(X[:, None, :] - Y[None, :, :], axis=2), c) ** p
    rows, cols = linear_sum_assignment(D)
    cost = float(D[rows, cols].sum())
    return float(((cost + c ** p * (n - m)) / n) ** (1.0 / p))


def metrics(trace: Iterable[Any], warmup: float = WARMUP, relevance_radius: float = 100.0) -> MetricsReport:
    records = list(trace)
    if not records:
        raise ValueError("metrics need a non-empty trace")
    dicts = [_as_dict(r) for r in records]

    sq: Dict[Tuple[int, int], List[float]] = {}
    aware_own: Dict[int, List[float]] = {}
    aware_col: Dict[int, List[float]] = {}
    phantoms: Dict[int, int] = {}
    ospa_steps: Dict[int, List[float]] = {}

    for rec in dicts:
        truth = {a["id"]: a for a in rec["ground_truth"]}
        late = rec["t"] >= warmup - 1e-9
        for hid_s, h in rec["hosts"].items():
            hid = int(hid_s)
            phantoms[hid] = phantoms.get(hid, 0) + int(h["awareness"]["phantoms"])
            for e in h["fused"]:
                a = truth.get(e["truth_id"]) if e["truth_id"] is not None else None
                if a is not None:
                    err2 = (e["position"][0] - a["x"]) ** 2 + (e["position"][1] - a["y"]) ** 2
                    sq.setdefault((hid, a["id"]), []).append(err2)
            aware_col.setdefault(hid, [])
            aware_own.setdefault(hid, [])
            ospa_steps.setdefault(hid, [])
            if late:
                aware_col[hid].append(h["awareness"]["ratio"])
                aware_own[hid].append(h["awareness_host_only"]["ratio"])
                me = truth[hid]
                relevant = [(a["x"], a["y"]) for aid, a in truth.items()
                            if aid != hid and math.hypot(a["x"] - me["x"], a["y"] - me["y"]) <= relevance_radius]
                ospa_steps[hid].append(ospa([e["position"][:2] for e in h["fused"]], relevant))

    def mean(values: List[float], fallback: List[float]) -> float:
        vals = values or fallback
        return float(np.mean(vals)) if vals else 0.0

    all_col = {hid: [r["hosts"][str(hid)]["awareness"]["ratio"] for r in dicts if str(hid) in r["hosts"]] for hid in aware_col}
    all_own = {hid: [r["hosts"][str(hid)]["awareness_host_only"]["ratio"] for r in dicts if str(hid) in r["hosts"]] for hid in aware_own}

    elapsed = [r.elapsed for r in records if isinstance(r, TraceRecord)]
    report = MetricsReport(
        steps=len(dicts),
        rmse={k: math.sqrt(float(np.mean(v))) for k, v in sorted(sq.items())},
        awareness_host_only={h: mean(aware_own[h], all_own[h]) for h in sorted(aware_own)},
        awareness_collaborative={h: mean(aware_col[h], all_col[h]) for h in sorted(aware_col)},
        phantoms=dict(sorted(phantoms.items())),
        ospa_mean={h: float(np.mean(v)) if v else 0.0 for h, v in sorted(ospa_steps.items())},
        bsm=dict(dicts[-1]["channel"]),
        runtime_per_step=float(np.mean(elapsed)) if elapsed else 0.0,
    )
    return report


# ---------------- files ----------------
def write_trace(path: str, records: Iterable[TraceRecord]) -> List[TraceRecord]:
    """Stream records to a JSONL file; returns them for metrics and rendering."""
    kept = []
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(rec.to_json() + "\n")
            kept.append(rec)
    logger.info("trace written to %s (%d records)", path, len(kept))
    return kept


def read_trace(path: str) -> List[Dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def write_metrics(path: str, report: MetricsReport, include_timing: bool = False) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["metric", "host_id", "value"])
        w.writerows(report.rows(include_timing))
    logger.info("metrics written to %s", path)
