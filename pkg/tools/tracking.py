# tools/tracking.py
"""
JPDA multi-object tracker over a 2-D constant-velocity Kalman model.

State is [px, py, vx, vy]; measurements are positions [px, py]. Association
probabilities come from exact enumeration of feasible joint events, done per
cluster of tracks that share gated measurements (marginals are identical to
enumerating the whole problem at once).
"""

import math
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import multivariate_normal

from utils.errors import NumericalError

logger = logging.getLogger(__name__)

H = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])
MAX_JOINT_EVENTS = 1_000_000
SEED_THRESHOLD = 0.1


class TrackStatus(str, Enum):
    TENTATIVE = "Tentative"
    CONFIRMED = "Confirmed"


@dataclass(frozen=True)
class TrackerParams:
    q: float = 1.0
    r_lidar: Tuple[Tuple[float, float], Tuple[float, float]] = ((0.25, 0.0), (0.0, 0.25))
    r_bsm_pos: Tuple[Tuple[float, float], Tuple[float, float]] = ((1.0, 0.0), (0.0, 1.0))
    gate_gamma: float = 9.21
    p_detect: float = 0.9
    clutter_density: float = 1e-4
    confirm_m: int = 2
    confirm_n: int = 3
    delete_k: int = 5
    init_p: Tuple[float, float, float, float] = (1.0, 1.0, 25.0, 25.0)

    def __post_init__(self):
        if not (0.0 < self.p_detect <= 1.0):
            raise ValueError("p_detect must be in (0, 1]")
        if self.clutter_density < 0.0:
            raise ValueError("clutter_density must be >= 0")
        if self.confirm_m > self.confirm_n:
            raise ValueError("confirm_m must be <= confirm_n")
        if self.gate_gamma <= 0.0:
            raise ValueError("gate_gamma must be > 0")
        if self.delete_k < 1:
            raise ValueError("delete_k must be >= 1")

    @property
    def R_lidar(self) -> np.ndarray:
        return np.array(self.r_lidar, dtype=float)

    @property
    def R_bsm(self) -> np.ndarray:
        return np.array(self.r_bsm_pos, dtype=float)


@dataclass(frozen=True)
class Source:
    kind: str  # "lidar" | "bsm"
    id: Optional[int] = None

    def label(self) -> str:
        return self.kind if self.id is None else f"{self.kind}:{self.id}"


LIDAR = Source("lidar")


@dataclass(frozen=True, eq=False)
class Measurement:
    z: np.ndarray
    R: np.ndarray
    source: Source = LIDAR
    t: float = 0.0
    sender_id: Optional[int] = None
    velocity: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class Track:
    track_id: int
    x: np.ndarray
    P: np.ndarray
    status: TrackStatus = TrackStatus.TENTATIVE
    hit_history: Tuple[bool, ...] = ()
    misses: int = 0
    bound_bsm_id: Optional[int] = None
    frame: str = "world"
    senders: frozenset = field(default_factory=frozenset)

    @property
    def position(self) -> np.ndarray:
        return self.x[:2]

    @property
    def velocity(self) -> np.ndarray:
        return self.x[2:]

    @property
    def confirmed(self) -> bool:
        return self.status is TrackStatus.CONFIRMED

    def to_dict(self) -> dict:
        d = {
            "track_id": self.track_id,
            "x": [float(v) for v in self.x],
            "status": self.status.value,
            "frame": self.frame,
        }
        if self.bound_bsm_id is not None:
            d["bound_bsm_id"] = self.bound_bsm_id
        return d


# ---------------- Kalman pieces ----------------
def transition(dt: float) -> np.ndarray:
    F = np.eye(4)
    F[0, 2] = dt
    F[1, 3] = dt
    return F


def process_noise(dt: float, q: float) -> np.ndarray:
    Q = np.zeros((4, 4))
    a, b, c = dt ** 3 / 3.0 * q, dt ** 2 / 2.0 * q, dt * q
    Q[0, 0] = Q[1, 1] = a
    Q[0, 2] = Q[2, 0] = Q[1, 3] = Q[3, 1] = b
    Q[2, 2] = Q[3, 3] = c
    return Q


def _sym(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def predict(track: Track, dt: float, q: float) -> Track:
    if dt < 0.0:
        raise ValueError(f"negative prediction interval {dt}")
    if dt == 0.0:
        return track
    F = transition(dt)
    return replace(track, x=F @ track.x, P=_sym(F @ track.P @ F.T + process_noise(dt, q)))


def innovation(track: Track, meas: Measurement) -> Tuple[np.ndarray, np.ndarray]:
    nu = np.asarray(meas.z, dtype=float) - H @ track.x
    S = H @ track.P @ H.T + meas.R
    return nu, S


def mahalanobis2(nu: np.ndarray, S: np.ndarray) -> float:
    try:
        np.linalg.cholesky(S)
        return float(nu @ np.linalg.solve(S, nu))
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"innovation covariance not invertible: {e}") from e


def gate(track: Track, meas: Sequence[Measurement], gate_gamma: float) -> List[int]:
    out = []
    for j, m in enumerate(meas):
        nu, S = innovation(track, m)
        if mahalanobis2(nu, S) <= gate_gamma:
            out.append(j)
    return out


def likelihood(track: Track, meas: Measurement) -> float:
    nu, S = innovation(track, meas)
    return float(multivariate_normal.pdf(nu, mean=np.zeros(2), cov=S))


def kalman_update(track: Track, meas: Measurement) -> Track:
    nu, S = innovation(track, meas)
    K = track.P @ H.T @ np.linalg.inv(S)
    return replace(track, x=track.x + K @ nu, P=_sym(track.P - K @ S @ K.T))


# ---------------- joint association ----------------
def enumerate_joint_events(gates: Sequence[Sequence[int]]) -> Iterator[Tuple[int, ...]]:
    """Feasible joint events: per track 0 (miss) or measurement index + 1, no measurement reused."""
    n = len(gates)
    assignment = [0] * n
    used = set()
    count = 0

    def dfs(t: int):
        nonlocal count
        if t == n:
            count += 1
            if count > MAX_JOINT_EVENTS:
                raise NumericalError(f"more than {MAX_JOINT_EVENTS} feasible joint events")
            yield tuple(assignment)
            return
        assignment[t] = 0
        yield from dfs(t + 1)
        for j in gates[t]:
            if j in used:
                continue
            used.add(j)
            assignment[t] = j + 1
            yield from dfs(t + 1)
            used.discard(j)
        assignment[t] = 0

    yield from dfs(0)


def _clusters(gates: Sequence[Sequence[int]]) -> List[List[int]]:
    parent = list(range(len(gates)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    owner: Dict[int, int] = {}
    for t, g in enumerate(gates):
        for j in g:
            if j in owner:
                a, b = find(owner[j]), find(t)
                if a != b:
                    parent[max(a, b)] = min(a, b)
            else:
                owner[j] = t
    groups: Dict[int, List[int]] = {}
    for t in range(len(gates)):
        groups.setdefault(find(t), []).append(t)
    return list(groups.values())


def jpda_probabilities(tracks: Sequence[Track], measurements: Sequence[Measurement],
                       gates: Sequence[Sequence[int]], params: TrackerParams,
                       likelihoods: Optional[np.ndarray] = None) -> np.ndarray:
    """beta[t, 0] = miss probability, beta[t, j + 1] = P(measurement j belongs to track t)."""
    T, M = len(tracks), len(measurements)
    beta = np.zeros((T, M + 1))
    if T == 0:
        return beta
    beta[:, 0] = 1.0
    if M == 0:
        return beta

    g = np.zeros((T, M))
    for t in range(T):
        for j in gates[t]:
            g[t, j] = likelihoods[t, j] if likelihoods is not None else likelihood(tracks[t], measurements[j])

    pd, lam = params.p_detect, params.clutter_density
    # Measurements outside every gate in a cluster add the same clutter factor
    # to each of its events and cancel on normalization, so they are left out.
    # With clutter_density == 0 this keeps the gated associations well defined.
    for members in _clusters(gates):
        sub_gates = [gates[t] for t in members]
        meas_in = sorted({j for gs in sub_gates for j in gs})
        if not meas_in:
            continue
        acc = np.zeros((len(members), M + 1))
        total = 0.0
        for event in enumerate_joint_events(sub_gates):
            w = 1.0
            assigned = 0
            for k, a in enumerate(event):
                if a:
                    w *= pd * g[members[k], a - 1]
                    assigned += 1
                else:
                    w *= 1.0 - pd
            w *= lam ** (len(meas_in) - assigned)
            if w == 0.0:
                continue
            total += w
            for k, a in enumerate(event):
                acc[k, a] += w
        rows = np.array(members)
        if total <= 0.0:
            logger.warning("all joint event weights vanished for tracks %s, treating as missed",
                           [tracks[t].track_id for t in members])
            beta[rows] = 0.0
            beta[rows, 0] = 1.0
            continue
        beta[rows] = acc / total
    return beta


def jpda_update(track: Track, measurements: Sequence[Measurement], beta_row: np.ndarray) -> Track:
    beta_row = np.asarray(beta_row, dtype=float)
    if abs(beta_row.sum() - 1.0) > 1e-9:
        raise ValueError(f"association row sums to {beta_row.sum()}, expected 1")
    b0 = float(beta_row[0])
    active = [j for j in range(len(measurements)) if beta_row[j + 1] > 0.0]
    if not active:
        return track

    weights = beta_row[[j + 1 for j in active]]
    R = sum(w * measurements[j].R for w, j in zip(weights, active)) / weights.sum()
    S = H @ track.P @ H.T + R
    K = track.P @ H.T @ np.linalg.inv(S)

    nus = [np.asarray(measurements[j].z, dtype=float) - H @ track.x for j in active]
    nu_bar = sum(w * nu for w, nu in zip(weights, nus))
    spread = sum(w * np.outer(nu, nu) for w, nu in zip(weights, nus)) - np.outer(nu_bar, nu_bar)

    x = track.x + K @ nu_bar
    P = b0 * track.P + (1.0 - b0) * (track.P - K @ S @ K.T) + K @ spread @ K.T
    return replace(track, x=x, P=_sym(P))


def seed_track(meas: Measurement, track_id: int, params: TrackerParams, frame: str = "world") -> Track:
    # the seeding measurement is the first entry of the hit history
    vx, vy = (float(meas.velocity[0]), float(meas.velocity[1])) if meas.velocity is not None else (0.0, 0.0)
    x = np.array([meas.z[0], meas.z[1], vx, vy], dtype=float)
    senders = frozenset([meas.sender_id]) if meas.sender_id is not None else frozenset()
    return Track(track_id=track_id, x=x, P=np.diag(np.asarray(params.init_p, dtype=float)),
                 status=TrackStatus.TENTATIVE, hit_history=(True,), misses=0,
                 bound_bsm_id=meas.source.id if meas.source.kind == "bsm" else None,
                 frame=frame, senders=senders)


def manage(tracks: Sequence[Track], measurements: Sequence[Measurement], beta: np.ndarray,
           params: TrackerParams, next_id: int, frame: str = "world") -> Tuple[List[Track], int]:
    out: List[Track] = []
    M = len(measurements)
    for t, trk in enumerate(tracks):
        row = beta[t]
        hit = M > 0 and float(row[1:].max()) > float(row[0])
        history = (trk.hit_history + (hit,))[-params.confirm_n:]
        misses = 0 if hit else trk.misses + 1
        if misses >= params.delete_k:
            logger.debug("track %d deleted after %d misses", trk.track_id, misses)
            continue
        status = trk.status
        if status is TrackStatus.TENTATIVE and sum(history) >= params.confirm_m:
            status = TrackStatus.CONFIRMED
        bound, senders = trk.bound_bsm_id, trk.senders
        if hit:
            j = int(np.argmax(row[1:]))
            m = measurements[j]
            if m.source.kind == "bsm":
                bound = m.source.id
            if m.sender_id is not None:
                senders = senders | {m.sender_id}
        out.append(replace(trk, status=status, hit_history=history, misses=misses,
                           bound_bsm_id=bound, senders=senders))

    for j in range(M):
        if float(beta[:, j + 1].sum()) < SEED_THRESHOLD:
            out.append(seed_track(measurements[j], next_id, params, frame))
            next_id += 1
    return out, next_id


def nees(x_true: np.ndarray, track: Track) -> float:
    e = np.asarray(x_true, dtype=float) - track.x
    return float(e @ np.linalg.solve(track.P, e))


# ---------------- tracker ----------------
def _measurement_key(m: Measurement):
    return (float(m.z[0]), float(m.z[1]), m.source.kind, -1 if m.source.id is None else m.source.id,
            -1 if m.sender_id is None else m.sender_id)


class Tracker:
    """Single-owner tracker state: tracks, id counter, clock and frame."""

    def __init__(self, params: TrackerParams, frame: str = "world", name: str = ""):
        self.params = params
        self.frame = frame
        self.name = name
        self.tracks: List[Track] = []
        self.next_id = 1
        self.t_last: Optional[float] = None

    def step(self, measurements: Sequence[Measurement], t: float) -> List[Track]:
        if self.t_last is not None and t < self.t_last:
            raise ValueError(f"tracker {self.name!r} stepped backwards: {t} < {self.t_last}")
        dt = 0.0 if self.t_last is None else t - self.t_last
        self.t_last = t

        meas = sorted(measurements, key=_measurement_key)
        tracks = [predict(trk, dt, self.params.q) for trk in self.tracks]
        gates = [gate(trk, meas, self.params.gate_gamma) for trk in tracks]
        beta = jpda_probabilities(tracks, meas, gates, self.params)
        tracks = [jpda_update(trk, meas, beta[i]) for i, trk in enumerate(tracks)]
        self.tracks, self.next_id = manage(tracks, meas, beta, self.params, self.next_id, self.frame)
        return self.confirmed()

    def confirmed(self) -> List[Track]:
        return [trk for trk in self.tracks if trk.confirmed]


def tracker_step(state: Tracker, measurements: Sequence[Measurement], t: float) -> List[Track]:
    return state.step(measurements, t)
