"""``locwatch serve`` runs the backend; ``locwatch broker`` runs a standalone TCP broker."""

from __future__ import annotations

import argparse
import asyncio
import logging
import signal
import sys

from .backend import ALL_ROLES, Backend, BackendConfig, run_broker

log = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="locwatch")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run gateway, ingest, function runtime and guardian")
    serve.add_argument("--config", help="TOML or JSON configuration file")
    serve.add_argument("--broker", help="broker URL (memory:// or tcp://host:port)")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8080)
    serve.add_argument("--roles", help=f"comma-separated subset of {','.join(sorted(ALL_ROLES))}")
    serve.add_argument("--data-dir", help="directory for persisted fixes")

    broker = sub.add_parser("broker", help="run a TCP broker")
    broker.add_argument("--host", default="127.0.0.1")
    broker.add_argument("--port", type=int, default=7070)
    return parser


async def _serve(cfg: BackendConfig, host: str, port: int) -> None:
    backend = Backend(cfg)
    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        loop.add_signal_handler(sig, stop.set)
    url = await backend.start(host, port)
    log.info("roles %s up%s", ",".join(sorted(cfg.roles)), f" at {url}" if url else "")
    await stop.wait()
    log.info("shutting down")
    await backend.stop()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.command == "broker":
        try:
            asyncio.run(run_broker(args.host, args.port))
        except KeyboardInterrupt:
            pass
        return 0
    cfg = BackendConfig.load(args.config) if args.config else BackendConfig()
    if args.broker:
        cfg.broker_url = args.broker
    if args.data_dir:
        cfg.data_dir = args.data_dir
    if args.roles:
        roles = frozenset(r.strip() for r in args.roles.split(",") if r.strip())
        unknown = roles - ALL_ROLES
        if unknown:
            print(f"locwatch: unknown roles {sorted(unknown)}", file=sys.stderr)
            return 2
        cfg.roles = roles
    if cfg.roles != ALL_ROLES and not (cfg.broker_url or "").startswith("tcp://"):
        print("locwatch: splitting roles needs a tcp:// broker", file=sys.stderr)
        return 2
    asyncio.run(_serve(cfg, args.host, args.port))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
