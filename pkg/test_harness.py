import csv
import functools
import glob
import json
import math
import os
import time

import pytest

import covsim
from harness import Simulation, metrics, ospa, read_trace, run, write_metrics, write_trace
from render import render_svg
from tools.scenario import load_scenario_doc, shipped_scenario
from tools.v2x import BsmSource, bsm_from_dict, decode_bsm, decode_position
from utils.helpers import DATA_DIR

ORIGIN = {"lat": 40.0, "lon": -83.0, "alt": 0.0}


def host_doc(actors, duration=1.0, dt=0.1, **blocks):
    d = {
        "name": "unit",
        "origin": ORIGIN,
        "dt": dt,
        "duration": duration,
        "host_id": 0,
        "actors": [{"id": 0, "class": "Car", "capability": "ConnectedWithSensors", "extent": [4.5, 1.8, 1.5],
                    "waypoints": [[0.0, 0.0]]}] + actors,
    }
    d.update(blocks)
    return d


def vehicle(aid, waypoints, capability="NoSensing", speed=0.0):
    return {"id": aid, "class": "Car", "capability": capability, "extent": [4.5, 1.8, 1.5],
            "waypoints": waypoints, "speed": speed}


TWO_HOSTS = host_doc([vehicle(1, [[-20.0, 6.0], [20.0, 6.0]], speed=5.0),
                      vehicle(3, [[20.0, -8.0]], capability="ConnectedWithSensors")])


def traced(doc, seed=0, workers=1):
    return list(Simulation(load_scenario_doc(doc), seed, workers=workers, progress=False).records())


# ---------------- runs ----------------
def test_minimal_scenario_trace():
    records = list(run(load_scenario_doc(shipped_scenario("minimal"))))
    assert len(records) == 10
    assert [r.step_index for r in records] == list(range(1, 11))
    for r in records:
        h = r.hosts[0]
        assert h["detections"] == []
        assert h["fused"] == []
        assert h["awareness"]["ratio"] == 1.0


def test_runs_are_reproducible(tmp_path):
    a = [r.to_json() for r in traced(TWO_HOSTS, seed=7)]
    b = [r.to_json() for r in traced(TWO_HOSTS, seed=7)]
    c = [r.to_json() for r in traced(TWO_HOSTS, seed=7, workers=2)]
    assert a == b == c

    outputs = []
    for name in ("one", "two"):
        records = write_trace(str(tmp_path / f"{name}.jsonl"), traced(TWO_HOSTS, seed=7))
        write_metrics(str(tmp_path / f"{name}.csv"), metrics(records))
        render_svg(records, 0.5, str(tmp_path / f"{name}.svg"))
        outputs.append([(tmp_path / f"{name}{ext}").read_bytes() for ext in (".jsonl", ".csv", ".svg")])
    assert outputs[0] == outputs[1]


def test_trace_file_round_trip(tmp_path):
    records = write_trace(str(tmp_path / "t.jsonl"), traced(TWO_HOSTS))
    back = read_trace(str(tmp_path / "t.jsonl"))
    assert back == [json.loads(r.to_json()) for r in records]
    assert set(back[0]["hosts"]) == {"0", "3"}


def test_metrics_need_records():
    with pytest.raises(ValueError):
        metrics([])


def test_bsm_only_static_vehicle_rmse_within_quantization():
    doc = host_doc([vehicle(1, [[150.0, 0.0]], capability="Connected")], duration=2.0, channel={"loss_prob": 0.0})
    report = metrics(traced(doc))
    # half a 1e-7 degree step in latitude and longitude at 40N
    assert report.rmse[(0, 1)] < 0.01
    assert report.phantoms[0] == 0


def test_total_loss_leaves_only_own_sensors():
    actors = [vehicle(1, [[60.0, 30.0]], capability="Connected"), vehicle(2, [[0.0, 12.0]])]
    lossy = metrics(traced(host_doc(actors, duration=2.0, channel={"loss_prob": 1.0})))
    assert lossy.awareness_collaborative[0] == lossy.awareness_host_only[0]
    assert lossy.bsm["delivered"] == 0

    clean = metrics(traced(host_doc(actors, duration=2.0, channel={"loss_prob": 0.0})))
    assert clean.awareness_collaborative[0] > clean.awareness_host_only[0]


def test_metrics_rows_skip_timing_by_default(tmp_path):
    report = metrics(traced(TWO_HOSTS))
    path = tmp_path / "m.csv"
    write_metrics(str(path), report)
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["metric", "host_id", "value"]
    names = {r[0] for r in rows[1:]}
    assert {"awareness_host_only", "awareness_collaborative", "bsm_sent", "ospa_mean"} <= names
    assert "runtime_per_step" not in names
    assert any(r[0] == "runtime_per_step" for r in report.rows(include_timing=True))


def test_channel_counters_balance_every_step():
    for r in traced(TWO_HOSTS):
        c = r.channel
        assert c["delivered"] + c["dropped"] + c["in_flight"] == c["sent"]


# ---------------- ospa ----------------
def test_ospa_examples():
    assert ospa([], []) == 0.0
    assert ospa([[0.0, 0.0]], [], c=10.0) == 10.0
    assert ospa([[0.0, 0.0]], [[3.0, 4.0]], c=10.0, p=1) == pytest.approx(5.0)
    assert ospa([[0.0, 0.0]], [[0.0, 0.0], [100.0, 0.0]], c=10.0, p=1) == pytest.approx(5.0)
    assert ospa([[1.0, 1.0], [5.0, 5.0]], [[5.0, 5.0], [1.0, 1.0]]) == pytest.approx(0.0)


# ---------------- rendering ----------------
def snapshot_record():
    truth = [{"id": i, "class": "Car", "capability": "NoSensing", "x": 10.0 * i, "y": 0.0, "yaw": 0.0, "speed": 0.0,
              "extent": [4.5, 1.8, 1.5]} for i in range(4)]
    host = {"awareness_host_only": {"perceivable": [1]}, "awareness": {"perceivable": [1, 2]},
            "detections": [], "tracks": [], "fused": []}
    return {"t": 1.0, "step": 10, "ground_truth": truth, "hosts": {"0": host}, "channel": {}}


def test_render_styles_follow_awareness(tmp_path):
    svg = render_svg([snapshot_record()], 1.0, str(tmp_path / "s.svg"))
    assert 'class="actor host" data-id="0"' in svg
    assert 'class="actor local" data-id="1"' in svg
    assert 'class="actor collab" data-id="2"' in svg
    assert 'class="actor unseen" data-id="3"' in svg
    assert (tmp_path / "s.svg").read_text() == svg


def test_render_empty_world(tmp_path):
    records = list(run(load_scenario_doc(shipped_scenario("minimal"))))
    svg = render_svg(records, 0.5, str(tmp_path / "e.svg"))
    assert svg.count('class="actor ') == 1
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")


def test_render_rejects_bad_time(tmp_path):
    with pytest.raises(ValueError):
        render_svg([], 0.0, str(tmp_path / "x.svg"))
    with pytest.raises(ValueError):
        render_svg([snapshot_record()], 5.0, str(tmp_path / "x.svg"))


# ---------------- command line ----------------
def test_cli_validate(tmp_path, capsys):
    assert covsim.main(["validate", shipped_scenario("minimal")]) == 0
    assert json.loads(capsys.readouterr().out)["status"] == "ok"

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"dt": 0.1}))
    assert covsim.main(["validate", str(bad)]) == 2
    assert json.loads(capsys.readouterr().out)["status"] == "error"


def test_cli_run_writes_outputs(tmp_path):
    out, m, svg, log = (str(tmp_path / n) for n in ("t.jsonl", "m.csv", "s.svg", "b.jsonl"))
    code = covsim.main(["run", shipped_scenario("minimal"), "--seed", "3", "--out", out, "--metrics", m,
                        "--svg-at", "0.5", "--svg-out", svg, "--bsm-log", log])
    assert code == 0
    assert len(read_trace(out)) == 10
    assert (tmp_path / "s.svg").exists()
    assert (tmp_path / "m.csv").read_text().startswith("metric,host_id,value\n")


def test_cli_run_rejects_half_svg_request(tmp_path):
    assert covsim.main(["run", shipped_scenario("minimal"), "--out", str(tmp_path / "t.jsonl"),
                        "--svg-at", "0.5"]) == 2


# ---------------- shipped scenarios ----------------
@pytest.mark.slow
def test_fig8_pedestrian_reaches_host_through_truck():
    sc = load_scenario_doc(shipped_scenario("fig8"))
    first_proxy, first_seen = None, None
    for rec in Simulation(sc, 0, progress=False).records():
        ped = next(a for a in rec.ground_truth if a["id"] == 2)
        if first_proxy is None:
            for d in rec.hosts[1]["sent"]:
                if d["source"] != "PROXY":
                    continue
                p, _ = decode_position(bsm_from_dict(d), sc.origin)
                if math.hypot(p.x - ped["x"], p.y - ped["y"]) <= 2.0:
                    first_proxy = rec.t
        if first_seen is None and any(e["truth_id"] == 2 for e in rec.hosts[0]["fused"]):
            first_seen = rec.t
    assert first_proxy is not None and first_seen is not None
    assert first_proxy <= first_seen <= first_proxy + 0.3 + 1e-9


FIG7_HOST_ONLY = {1, 2}
FIG7_COLLABORATIVE = {1, 2, 3, 4, 5, 6, 9, 10, 11, 12, 13, 14, 15, 16, 19}
SHIPPED = sorted(os.path.basename(p)[:-len(".scenario.json")]
                 for p in glob.glob(os.path.join(DATA_DIR, "scenarios", "*.scenario.json")))


@functools.lru_cache(maxsize=None)
def shipped_run(name, noise_free=False):
    """(records, channel log, wall seconds) of one full run of a shipped scenario."""
    with open(shipped_scenario(name), encoding="utf-8") as f:
        doc = json.load(f)
    if noise_free:
        doc.setdefault("lidar", {})["range_noise_sigma"] = 0.0
        doc.setdefault("channel", {})["loss_prob"] = 0.0
    sim = Simulation(load_scenario_doc(doc), 0, keep_bsm_log=True, progress=False)
    started = time.perf_counter()
    records = list(sim.records())
    return records, sim.channel.log, time.perf_counter() - started


@pytest.mark.slow
def test_fig7_awareness_sets_every_step():
    records, _, _ = shipped_run("fig7")
    assert records[-1].t == pytest.approx(30.0)
    late = [r for r in records if r.t >= 2.0 - 1e-9]
    assert late
    for r in late:
        h = r.hosts[0]
        assert set(h["awareness_host_only"]["perceivable"]) == FIG7_HOST_ONLY, r.t
        assert set(h["awareness"]["perceivable"]) == FIG7_COLLABORATIVE, r.t
    report = metrics(records)
    assert report.awareness_collaborative[0] > report.awareness_host_only[0]


@pytest.mark.slow
def test_fig7_runs_within_a_minute():
    _, _, seconds = shipped_run("fig7")
    assert seconds < 60.0


@pytest.mark.slow
@pytest.mark.parametrize("name", SHIPPED)
def test_noise_free_runs_have_no_phantoms(name):
    host = load_scenario_doc(shipped_scenario(name)).host_id
    records, _, _ = shipped_run(name, noise_free=True)
    for r in records:
        h = r.hosts[host]
        assert h["awareness"]["phantoms"] == 0, r.t
        assert h["awareness_host_only"]["phantoms"] == 0, r.t
    assert metrics(records).phantoms[host] == 0


@pytest.mark.slow
@pytest.mark.parametrize("name", SHIPPED)
def test_collaboration_never_loses_awareness(name):
    host = load_scenario_doc(shipped_scenario(name)).host_id
    records, _, _ = shipped_run(name, noise_free=True)
    for r in records:
        h = r.hosts[host]
        assert set(h["awareness_host_only"]["perceivable"]) <= set(h["awareness"]["perceivable"]), r.t


@pytest.mark.slow
@pytest.mark.parametrize("name", SHIPPED)
def test_one_self_bsm_per_tenth_second(name):
    sc = load_scenario_doc(shipped_scenario(name))
    _, log, _ = shipped_run(name, noise_free=True)
    windows = {}
    for entry in log:
        b = decode_bsm(entry["bytes"])
        if b.source is BsmSource.SELF:
            assert b.subject_id == b.sender_id == entry["sender"]
            windows.setdefault(b.sender_id, []).append(math.floor(entry["t"] * 10.0 + 1e-9))
    expected = list(range(1, round(sc.duration * 10.0) + 1))
    assert sorted(windows) == sc.connected_ids
    for aid, seen in windows.items():
        assert sorted(seen) == expected, aid
