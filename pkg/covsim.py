# covsim.py
"""
Command line entry point.

  covsim run <scenario.json> --seed N --out trace.jsonl [--metrics m.csv]
             [--svg-at T --svg-out snap.svg] [--dump-clouds DIR]
             [--bsm-log FILE] [--workers N]
  covsim validate <scenario.json>

Exit codes: 0 ok, 2 validation error, 3 runtime error.
"""

import sys
import json
import logging
import argparse
from typing import List, Optional

from harness import Simulation, metrics, write_metrics, write_trace
from render import render_svg
from tools.scenario import load_scenario_doc
from tools.v2x import write_message_log
from utils.errors import CovsimError, ScenarioError
from utils.helpers import setup_logging

logger = logging.getLogger("covsim")

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_RUNTIME = 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="covsim", description="Collaborative perception co-simulation")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario and write its trace")
    r.add_argument("scenario")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True, help="trace file (JSONL)")
    r.add_argument("--metrics", help="metrics CSV")
    r.add_argument("--timing", action="store_true", help="include wall-clock runtime in the metrics CSV")
    r.add_argument("--svg-at", type=float, dest="svg_at")
    r.add_argument("--svg-out", dest="svg_out")
    r.add_argument("--dump-clouds", dest="dump_clouds", help="directory for binary point-cloud sidecars")
    r.add_argument("--bsm-log", dest="bsm_log", help="message log (.jsonl or length-prefixed binary)")
    r.add_argument("--workers", type=int, default=None)

    v = sub.add_parser("validate", help="check a scenario document")
    v.add_argument("scenario")
    return p


def cmd_validate(args) -> int:
    try:
        sc = load_scenario_doc(args.scenario)
    except ScenarioError as e:
        print(json.dumps({"status": "error", "path": e.path, "message": str(e)}))
        return EXIT_INVALID
    print(json.dumps({"status": "ok", "name": sc.name, "actors": len(sc.actors), "steps": sc.n_steps,
                      "host_id": sc.host_id}))
    return EXIT_OK


def cmd_run(args) -> int:
    if (args.svg_at is None) != (args.svg_out is None):
        logger.error("--svg-at and --svg-out go together")
        return EXIT_INVALID
    if args.seed < 0 or args.seed >= 2 ** 64:
        logger.error("--seed must be an unsigned 64-bit integer")
        return EXIT_INVALID
    try:
        sc = load_scenario_doc(args.scenario)
    except ScenarioError as e:
        logger.error("invalid scenario: %s", e)
        return EXIT_INVALID

    try:
        sim = Simulation(sc, args.seed, workers=args.workers, keep_bsm_log=bool(args.bsm_log),
                         cloud_dir=args.dump_clouds)
        records = write_trace(args.out, sim.records())
        report = metrics(records, relevance_radius=sc.collab.relevance_radius)
        logger.info("awareness host-only %s collaborative %s, bsm %s", report.awareness_host_only,
                    report.awareness_collaborative, report.bsm)
        if args.metrics:
            write_metrics(args.metrics, report, include_timing=args.timing)
        if args.svg_out:
            render_svg(records, args.svg_at, args.svg_out, host_id=sc.host_id,
                       view_radius=sc.collab.relevance_radius, fov_radius=sc.lidar.max_range)
        if args.bsm_log:
            write_message_log(args.bsm_log, sim.channel.log)
            logger.info("message log written to %s (%d broadcasts)", args.bsm_log, len(sim.channel.log))
    except (CovsimError, ValueError, OSError) as e:
        logger.error("run failed: %s", e)
        return EXIT_RUNTIME
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    setup_logging()
    args = _parser().parse_args(argv)
    if args.command == "validate":
        return cmd_validate(args)
    return cmd_run(args)


if __name__ == "__main__":
    sys.exit(main())
