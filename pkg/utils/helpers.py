# utils/helpers.py
"""
Small shared helpers:
- angle normalisation
- JSON rule files with in-code fallbacks
- counter-based (stateless) random numbers keyed by integers
- logging setup driven by COVSIM_LOG
"""

import os
import json
import math
import logging
from typing import Any, Dict, Optional

import numpy as np

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DATA_DIR = os.path.join(REPO_ROOT, "data")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


# ---------------- angles ----------------
def normalize_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = math.fmod(a, 2.0 * math.pi)
    if w <= -math.pi:
        w += 2.0 * math.pi
    elif w > math.pi:
        w -= 2.0 * math.pi
    return w


# ---------------- json files ----------------
def load_json(path: str, fallback: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    if os.path.exists(path):
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
                if isinstance(data, dict):
                    return data
        except Exception:
            logging.getLogger(__name__).warning("could not read %s, using built-in values", path)
    return dict(fallback or {})


# ---------------- counter-based random numbers ----------------
def mix64(x: int) -> int:
    """splitmix64 finaliser on a Python int."""
    z = (x + _GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def counter_key(*parts: int) -> int:
    h = 0
    for p in parts:
        h = mix64(h ^ (int(p) & MASK64))
    return h


def counter_uniform(*parts: int) -> float:
    """Uniform draw in [0, 1) determined only by the integer key parts."""
    return (counter_key(*parts) >> 11) * (1.0 / 9007199254740992.0)


def _mix64_array(x: np.ndarray) -> np.ndarray:
    z = x + np.uint64(_GOLDEN)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def counter_normal_array(key: int, shape) -> np.ndarray:
    """Standard normals where element i depends only on (key, i)."""
    n = int(np.prod(shape))
    idx = np.arange(n, dtype=np.uint64) * np.uint64(2)
    base = np.uint64(key & MASK64)
    with np.errstate(over="ignore"):
        a = _mix64_array(idx + base)
        b = _mix64_array(idx + np.uint64(1) + base)
    u1 = ((a >> np.uint64(11)).astype(np.float64) + 1.0) * (1.0 / 9007199254740992.0)
    u2 = (b >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
    z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
    return z.reshape(shape)


# ---------------- logging ----------------
def setup_logging(level_name: Optional[str] = None) -> int:
    name = (level_name or os.getenv("COVSIM_LOG", "info")).strip().lower()
    level = LOG_LEVELS.get(name, logging.INFO)
    root = logging.getLogger()
    for h in list(root.handlers):
        root.removeHandler(h)
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(level)
    return level


# ---------------- schedules ----------------
def rate_due(step_index: int, dt: float, rate_hz: float) -> bool:
    """True on the steps where a periodic task at rate_hz fires (step 0 included)."""
    if step_index == 0:
        return True
    now = math.floor(step_index * dt * rate_hz + 1e-9)
    before = math.floor((step_index - 1) * dt * rate_hz + 1e-9)
    return now != before
