# render.py
"""
Top-down SVG snapshot of one trace record: ground-truth boxes styled by what
the host perceives, its detections, local tracks, fused entities and the
sensor ring. Output bytes depend only on the inputs.
"""

import math
import logging
from typing import Any, Dict, Iterable, List, Optional, Sequence

logger = logging.getLogger(__name__)

SIZE = 800
MARGIN = 20.0
GRID = 10.0

STYLE = {
    "host": 'fill="#222222" stroke="#000000"',
    "local": 'fill="#4a90d9" stroke="#1f4e79"',
    "collab": 'fill="#6abf69" stroke="#2e7d32"',
    "unseen": 'fill="#dddddd" stroke="#9e9e9e"',
    "detection": 'fill="none" stroke="#e65100" stroke-width="1.5"',
    "track": 'fill="none" stroke="#6a1b9a" stroke-width="1.5"',
    "fused": 'fill="none" stroke="#c62828" stroke-width="1.5"',
    "ring": 'fill="none" stroke="#90a4ae" stroke-dasharray="6,4"',
    "grid": 'stroke="#eeeeee" stroke-width="1"',
}

LEGEND = [
    ("host", "host vehicle"),
    ("local", "perceived by own sensors"),
    ("collab", "perceived through V2X"),
    ("unseen", "not perceivable"),
    ("detection", "detection"),
    ("track", "local track"),
    ("fused", "fused entity"),
]


def _f(v: float) -> str:
    return f"{v:.2f}"


def _record_at(trace: Sequence[Any], t: float) -> Dict[str, Any]:
    records = [r.to_dict() if hasattr(r, "to_dict") else r for r in trace]
    if not records:
        raise ValueError("empty trace")
    times = [r["t"] for r in records]
    half = 0.5 * (times[1] - times[0]) if len(times) > 1 else 1e-6
    if t < times[0] - half or t > times[-1] + half:
        raise ValueError(f"t={t} outside trace [{times[0]}, {times[-1]}]")
    return min(records, key=lambda r: (abs(r["t"] - t), r["t"]))


def _box_corners(x: float, y: float, yaw: float, length: float, width: float) -> List[tuple]:
    c, s = math.cos(yaw), math.sin(yaw)
    out = []
    for dx, dy in ((0.5, 0.5), (-0.5, 0.5), (-0.5, -0.5), (0.5, -0.5)):
        bx, by = dx * length, dy * width
        out.append((x + c * bx - s * by, y + s * bx + c * by))
    return out


def render_svg(trace: Sequence[Any], t: float, path: str, host_id: Optional[int] = None,
               view_radius: float = 100.0, fov_radius: float = 40.0) -> str:
    rec = _record_at(trace, t)
    truth = {a["id"]: a for a in rec["ground_truth"]}
    hosts = rec.get("hosts", {})
    if host_id is None and hosts:
        host_id = min(int(h) for h in hosts)
    h = hosts.get(str(host_id), {}) if host_id is not None else {}
    me = truth.get(host_id) if host_id is not None else None
    cx, cy = (me["x"], me["y"]) if me else (0.0, 0.0)

    scale = (SIZE - 2 * MARGIN) / (2.0 * view_radius)

    def px(x: float, y: float) -> str:
        return f"{_f(SIZE / 2 + (x - cx) * scale)},{_f(SIZE / 2 - (y - cy) * scale)}"

    own = set(h.get("awareness_host_only", {}).get("perceivable", []))
    collab = set(h.get("awareness", {}).get("perceivable", []))

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">',
           f'<rect x="0" y="0" width="{SIZE}" height="{SIZE}" fill="#ffffff"/>']

    k0 = math.floor((-view_radius) / GRID)
    for k in range(k0, -k0 + 1):
        off = k * GRID
        out.append(f'<line x1="{_f(MARGIN)}" y1="{_f(SIZE / 2 - off * scale)}" x2="{_f(SIZE - MARGIN)}" '
                   f'y2="{_f(SIZE / 2 - off * scale)}" {STYLE["grid"]}/>')
        out.append(f'<line x1="{_f(SIZE / 2 + off * scale)}" y1="{_f(MARGIN)}" x2="{_f(SIZE / 2 + off * scale)}" '
                   f'y2="{_f(SIZE - MARGIN)}" {STYLE["grid"]}/>')

    if me:
        out.append(f'<circle cx="{_f(SIZE / 2)}" cy="{_f(SIZE / 2)}" r="{_f(fov_radius * scale)}" {STYLE["ring"]}/>')

    for aid in sorted(truth):
        a = truth[aid]
        if aid == host_id:
            style = "host"
        elif aid in own:
            style = "local"
        elif aid in collab:
            style = "collab"
        else:
            style = "unseen"
        pts = " ".join(px(x, y) for x, y in _box_corners(a["x"], a["y"], a["yaw"], a["extent"][0], a["extent"][1]))
        out.append(f'<polygon class="actor {style}" data-id="{aid}" points="{pts}" {STYLE[style]}/>')
        out.append(f'<text x="{px(a["x"], a["y"]).split(",")[0]}" y="{px(a["x"], a["y"]).split(",")[1]}" '
                   f'font-size="10" text-anchor="middle">{aid}</text>')

    if me:
        c, s = math.cos(me["yaw"]), math.sin(me["yaw"])
        for d in h.get("detections", []):
            bx, by = d["center"][0], d["center"][1]
            wx, wy = cx + c * bx - s * by, cy + s * bx + c * by
            pts = " ".join(px(x, y) for x, y in _box_corners(wx, wy, me["yaw"] + d["yaw"], d["extent"][0], d["extent"][1]))
            out.append(f'<polygon class="detection" points="{pts}" {STYLE["detection"]}/>')
    for trk in h.get("tracks", []):
        x, y = px(trk["x"][0], trk["x"][1]).split(",")
        out.append(f'<circle class="track" cx="{x}" cy="{y}" r="4.00" {STYLE["track"]}/>')
    for e in h.get("fused", []):
        x, y = (float(v) for v in px(e["position"][0], e["position"][1]).split(","))
        out.append(f'<polygon class="fused" points="{_f(x)},{_f(y - 6)} {_f(x + 6)},{_f(y)} {_f(x)},{_f(y + 6)} '
                   f'{_f(x - 6)},{_f(y)}" {STYLE["fused"]}/>')

    for i, (key, label) in enumerate(LEGEND):
        y = 30 + 18 * i
        out.append(f'<rect x="30" y="{y - 10}" width="12" height="12" {STYLE[key]}/>')
        out.append(f'<text x="48" y="{y}" font-size="12">{label}</text>')
    out.append(f'<text x="30" y="{SIZE - 30}" font-size="12">t = {rec["t"]:.2f} s</text>')
    out.append("</svg>")

    text = "\n".join(out) + "\n"
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    logger.info("snapshot at t=%.2f written to %s", rec["t"], path)
    return text
