"""Command line entry point: ``codedcache <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
from dataclasses import asdict

from . import experiments as ex
from .model import DEFAULT_SYMBOL_SIZE


def _tau(value: str):
    return "max" if value.lower() == "max" else int(value)


def _floats(value: str):
    return [float(v) for v in value.split(",") if v]


def _ints(value: str):
    return [int(float(v)) for v in value.split(",") if v]


def _hostport(value: str):
    host, _, port = value.rpartition(":")
    if not host or not port:
        raise argparse.ArgumentTypeError("expected host:port")
    return host, int(port)


def _sim_flags(p: argparse.ArgumentParser):
    p.add_argument("--warmup", type=int, help="raw requests before measuring (default 10*L)")
    p.add_argument("--measured", type=int, help="measured raw requests (default max(2e5, 20*L))")
    p.add_argument("--count-mode", choices=("raw", "entries"), default="raw",
                   help="what the queue length L caps (default: raw requests)")


def _preset_flags(p: argparse.ArgumentParser, default_out: str):
    _sim_flags(p)
    p.add_argument("--seeds", type=int, default=10, help="number of seeds per grid point")
    p.add_argument("--seed-base", type=int, default=0)
    p.add_argument("--jobs", type=int, default=ex.default_jobs())
    p.add_argument("--out", default=default_out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="codedcache", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sim", help="one steady-state simulation")
    p.add_argument("--caches", "-K", type=int, default=10)
    p.add_argument("--prob", "-p", type=float, default=0.5)
    p.add_argument("--tau", type=_tau, default="max")
    p.add_argument("--queue", "-L", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    _sim_flags(p)

    p = sub.add_parser("fig2", help="gain vs queue length for several tau (K=10, p=0.5)")
    _preset_flags(p, "fig2.csv")
    p.add_argument("--tau-grid", type=_ints)
    p.add_argument("--L-grid", type=_ints)

    p = sub.add_parser("fig3", help="first-fit gain with L = K for several p")
    _preset_flags(p, "fig3.csv")
    p.add_argument("--p-grid", type=_floats)
    p.add_argument("--L-grid", type=_ints)
    p.add_argument("--fit-min-L", type=int, default=ex.FIG3_FIT_MIN_L)

    p = sub.add_parser("asymptote", help="large-queue limit next to perfect-fit simulation")
    _preset_flags(p, "asymptote.csv")
    p.add_argument("--K-grid", type=_ints)
    p.add_argument("--p-grid", type=_floats)
    p.add_argument("--queue", "-L", type=int)

    p = sub.add_parser("trace", help="local server + clients; smoothed gain series")
    p.add_argument("--clients", type=int, default=4)
    p.add_argument("--prob", type=float, default=0.5)
    p.add_argument("--tau", type=_tau, default="max")
    p.add_argument("--file-mb", type=float, default=10.0)
    p.add_argument("--symbol-size", type=int, default=DEFAULT_SYMBOL_SIZE)
    p.add_argument("--depth", type=int, default=50)
    p.add_argument("--ttl-ms", type=int, default=20)
    p.add_argument("--guard-ms", type=int, default=5)
    p.add_argument("--stagger", type=float, default=0.0, help="seconds between client starts")
    p.add_argument("--window", type=int, default=40)
    p.add_argument("--db", help="directory of videos (default: synthetic files)")
    p.add_argument("--out", default="trace.csv")

    p = sub.add_parser("server", help="run the origin server")
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--port", type=int, default=7000)
    p.add_argument("--db", required=True)
    p.add_argument("--caches", type=int, required=True)
    p.add_argument("--prob", type=float, required=True)
    p.add_argument("--tau", type=_tau, default="max")
    p.add_argument("--symbol-size", type=int, default=DEFAULT_SYMBOL_SIZE)
    p.add_argument("--guard-ms", type=int, default=20)
    p.add_argument("--eager", action="store_true",
                   help="send the queue head early whenever no requests are waiting")
    p.add_argument("--gain-csv")

    p = sub.add_parser("client", help="stream one video through the server")
    p.add_argument("--server", type=_hostport, required=True)
    p.add_argument("--id", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--prob", type=float, required=True)
    p.add_argument("--video", required=True)
    p.add_argument("--db", required=True, help="local copy of the video database")
    p.add_argument("--symbol-size", type=int, default=DEFAULT_SYMBOL_SIZE)
    p.add_argument("--depth", type=int, default=50)
    p.add_argument("--ttl-ms", type=int, help="deadline step (default: symbol playback time)")
    p.add_argument("--bitrate", type=float, default=700e3)
    p.add_argument("--out", default="-")
    return parser


def _preset(args, name, grid) -> ex.ExperimentPreset:
    return ex.ExperimentPreset(
        name=name, grid={k: v for k, v in grid.items() if v},
        seeds=tuple(range(args.seed_base, args.seed_base + args.seeds)),
        output=args.out, warmup=args.warmup, measured=args.measured,
        count_mode=args.count_mode, jobs=args.jobs)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    cmd = args.command

    if cmd == "sim":
        from .simulator import SimConfig, run_steady_state
        cfg = SimConfig(args.caches, args.prob, args.tau, args.queue, args.warmup,
                        args.measured, args.seed, args.count_mode)
        res = asdict(run_steady_state(cfg))
        res.pop("batch_gains")
        print(json.dumps(res, indent=2))
        return 0

    if cmd == "fig2":
        path = ex.run_preset(_preset(args, "fig2", {"tau": args.tau_grid, "L": args.L_grid}))
    elif cmd == "fig3":
        path = ex.run_preset(_preset(args, "fig3", {"p": args.p_grid, "L": args.L_grid,
                                                    "fit_min_L": [args.fit_min_L]}))
    elif cmd == "asymptote":
        path = ex.run_preset(_preset(args, "asymptote", {
            "K": args.K_grid, "p": args.p_grid, "L": [args.queue] if args.queue else None}))
    elif cmd == "trace":
        tc = ex.TraceConfig(clients=args.clients, p=args.prob, tau=args.tau,
                            file_bytes=int(args.file_mb * 1024 * 1024),
                            symbol_size=args.symbol_size, depth=args.depth, ttl_ms=args.ttl_ms,
                            guard_ms=args.guard_ms, stagger_s=args.stagger, window=args.window)
        result = ex.run_trace(tc, db=args.db)
        path = ex.emit_csv(result.rows, args.out)
        print(f"outputs intact: {all(result.outputs_match.values())}  "
              f"cumulative gain {result.cumulative_gain:.3f}  "
              f"steady-state gain {result.steady_gain:.3f}", file=sys.stderr)
    elif cmd == "server":
        return _serve(args)
    else:
        return _client(args)
    print(path)
    return 0


def _interrupt(signum, frame):
    raise KeyboardInterrupt


def _serve(args) -> int:
    from .content import ContentStore
    from .server import OriginServer, ServerState
    store = ContentStore(args.db, args.symbol_size)
    state = ServerState(store, args.caches, args.prob, args.tau, guard_ms=args.guard_ms,
                        eager=args.eager)
    server = OriginServer(state, args.host, args.port)
    print(f"serving {len(store.catalog)} videos on {server.address[0]}:{server.port}",
          file=sys.stderr)
    signal.signal(signal.SIGTERM, _interrupt)
    try:
        server.serve_forever()
    finally:
        if args.gain_csv and state.gain_trace:
            from .simulator import ewma_smooth
            smoothed = ewma_smooth(state.gain_trace, 40)
            ex.emit_csv([{"index": i, "time_ms": tx.time_ms, "parts": len(tx.headers),
                          "smoothed_gain": round(s, 6)}
                         for i, (tx, s) in enumerate(zip(state.transmissions, smoothed))],
                        args.gain_csv)
    return 0


def _client(args) -> int:
    from .client import ClientConfig, ClientError, stream_video
    from .protocol import ProtocolError
    cfg = ClientConfig(args.server, args.id, args.seed, args.prob, args.video, args.db,
                       args.symbol_size, args.depth, args.ttl_ms, args.bitrate, out=args.out)
    try:
        return stream_video(cfg)
    except (ClientError, ProtocolError, OSError, KeyError) as exc:
        print(f"client error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
