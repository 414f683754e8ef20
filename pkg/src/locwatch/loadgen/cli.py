"""``loadgen run --scenario fixed|varying ...``

Exit status is 0 only when no measured request failed; 2 when the target
cannot be reached.
"""

from __future__ import annotations

import argparse
import asyncio
import logging
import sys

from .runner import RunConfig, TargetUnreachable, config_dict, run_scenario
from .scenarios import build_fixed_scenario, build_varying_scenario

SCENARIOS = {"fixed": build_fixed_scenario, "varying": build_varying_scenario}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loadgen", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="drive a scenario against a running gateway")
    run.add_argument("--scenario", choices=sorted(SCENARIOS), required=True)
    run.add_argument("--scale", type=int, default=1, help="divide user counts by this factor")
    run.add_argument("--time-scale", type=float, default=1.0, help="divide phase durations by this factor")
    run.add_argument("--target", default="http://127.0.0.1:8080")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--out", default="loadgen-out", help="directory for metrics.csv and summary.json")
    run.add_argument("--ws-fraction", type=float, default=0.05)
    run.add_argument("-v", "--verbose", action="store_true")
    return parser


def _progress(sample) -> None:
    if sample.t % 10 == 0:
        logging.getLogger("loadgen").info(
            "t=%d users=%d ok=%d failed=%d p95=%.1fms", sample.t, sample.active_users,
            sample.ok, sample.failed, sample.latency_p95_ms)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        phases = SCENARIOS[args.scenario](args.scale, args.time_scale)
    except ValueError as exc:
        print(f"loadgen: {exc}", file=sys.stderr)
        return 2
    cfg = RunConfig(target=args.target.rstrip("/"), seed=args.seed, ws_fraction=args.ws_fraction,
                    progress=_progress)
    try:
        result = asyncio.run(run_scenario(phases, cfg))
    except TargetUnreachable as exc:
        print(f"loadgen: target unreachable: {exc}", file=sys.stderr)
        return 2
    result.summary["scenario"] = {"name": args.scenario, "scale": args.scale,
                                  "time_scale": args.time_scale, "config": config_dict(cfg)}
    out = result.write(args.out)
    s = result.summary
    print(f"{s['attempted']} requests, {s['ok']} ok, {s['failed']} failed, "
          f"p95 {s['latency_p95_ms']} ms -> {out}")
    return 0 if s["failed"] == 0 else 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
