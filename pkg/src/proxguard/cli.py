"""Command-line interface: keygen, simulate, analyze, serve, client.

`simulate` is driven by a JSON manifest so a run can be reproduced exactly;
re-running the same manifest yields byte-identical outputs.  The environment
variable PROXGUARD_SEED, when set, overrides the manifest seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import random
import signal
import socket
import socketserver
import sys
from pathlib import Path

from .crypto import SHARED_KEY_BYTES, gen_shared_key
from .granularity import GridGranularity, Semantics
from .protocol import (
    Ack,
    BuddyInfo,
    ErrorFrame,
    HashResponse,
    PrivacyProfile,
    SeekResponse,
    UpdateSchedule,
    build_hash_request,
    build_location_update,
    build_seek_request,
    decide_hash,
    decide_seek,
    PayloadMode,
)
from .server import BuddyGraph, LocationServer
from .simulator import (
    AnswerRecord,
    MetricsReport,
    ScenarioConfig,
    SimProtocol,
    ingest_traces,
    run_scenario,
)
from . import analytics
from .transport import FrameError, read_frame, write_frame

TRAFFIC_FAMILIES = [
    "location-update",
    "ack",
    "prox-request-seek",
    "prox-request-hash",
    "prox-response-seek",
    "prox-response-hash",
    "error",
]

METRIC_COLUMNS = [
    "protocol",
    "semantics",
    "users",
    "buddies",
    "cell_edge",
    "delta",
    "seed",
    "precision",
    "recall",
    "accuracy",
    "tp",
    "fp",
    "tn",
    "fn",
    "unknown",
    "updates_sent",
    "requests_sent",
    "mean_uncertainty_km2",
] + [f"frames_{fam}" for fam in TRAFFIC_FAMILIES] + [f"bytes_{fam}" for fam in TRAFFIC_FAMILIES]


# -- config file helpers -----------------------------------------------------


def parse_key_file(text: str) -> dict[str, bytes]:
    keys: dict[str, bytes] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        user, sep, hexkey = line.partition(":")
        user = user.strip()
        hexkey = hexkey.strip()
        if not sep or not user:
            raise ValueError(f"key file line {lineno}: expected 'user:hex'")
        try:
            key = bytes.fromhex(hexkey)
        except ValueError:
            raise ValueError(f"key file line {lineno}: invalid hex") from None
        if len(key) != SHARED_KEY_BYTES:
            raise ValueError(
                f"key file line {lineno}: key must be {SHARED_KEY_BYTES} bytes"
            )
        if user in keys:
            raise ValueError(f"key file line {lineno}: duplicate user {user!r}")
        keys[user] = key
    return keys


def format_key_file(keys: dict[str, bytes]) -> str:
    return "".join(f"{user}:{key.hex()}\n" for user, key in sorted(keys.items()))


def parse_granularity(text: str) -> GridGranularity:
    """Parse 'origin_x,origin_y,cell_edge,cols,rows' decimal text."""
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 5:
        raise ValueError("granularity must be 'origin_x,origin_y,cell_edge,cols,rows'")
    try:
        ox, oy, edge = float(parts[0]), float(parts[1]), float(parts[2])
        cols, rows = int(parts[3]), int(parts[4])
    except ValueError:
        raise ValueError("granularity fields must be decimal numbers") from None
    return GridGranularity(ox, oy, edge, cols, rows)


def _load_json(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ValueError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a JSON object")
    return data


def _read_text(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ValueError(f"no such file: {path}") from None


# -- keygen ------------------------------------------------------------------


def cmd_keygen(args: argparse.Namespace) -> int:
    graph = BuddyGraph.from_text(_read_text(args.graph))
    ids = set(graph.users())
    for user in graph.users():
        ids.update(graph.buddies_of(user))
    rng = random.Random(args.seed) if args.seed is not None else None
    keys = {user: gen_shared_key(rng) for user in sorted(ids)}
    Path(args.out).write_text(format_key_file(keys), encoding="utf-8")
    print(f"wrote {len(keys)} keys to {args.out}")
    return 0


# -- simulate ----------------------------------------------------------------


def _as_list(value) -> list:
    return value if isinstance(value, list) else [value]


def load_manifest(path: str) -> dict:
    manifest = _load_json(path)
    if "protocols" not in manifest:
        raise ValueError(f"{path}: manifest needs a 'protocols' list")
    return manifest


def manifest_runs(manifest: dict, seed: int) -> list[ScenarioConfig]:
    domain = manifest.get("domain", [4000.0, 4000.0])
    base = dict(
        users=int(manifest.get("users", 200)),
        domain_width=float(domain[0]),
        domain_height=float(domain[1]),
        update_interval=float(manifest.get("update_interval", 240.0)),
        request_period=float(manifest.get("request_period", 600.0)),
        duration=float(manifest.get("duration", 14400.0)),
        sample_period=float(manifest.get("sample_period", 120.0)),
        semantics=Semantics(manifest.get("semantics", "min-dist")),
        seed=seed,
        speed_min=float(manifest.get("speed_min", 0.5)),
        speed_max=float(manifest.get("speed_max", 2.0)),
        pause_max=float(manifest.get("pause_max", 60.0)),
        latency=float(manifest.get("latency", 0.0)),
        time_approximation=bool(manifest.get("time_approximation", True)),
    )
    for optional in ("update_offset", "request_offset", "max_speed"):
        if manifest.get(optional) is not None:
            base[optional] = float(manifest[optional])
    runs = []
    for protocol in manifest["protocols"]:
        for buddies in _as_list(manifest.get("buddies", 20)):
            for cell_edge in _as_list(manifest.get("cell_edge", 200.0)):
                for delta in _as_list(manifest.get("delta", 400.0)):
                    runs.append(
                        ScenarioConfig(
                            protocol=SimProtocol(protocol),
                            buddies=int(buddies),
                            cell_edge=float(cell_edge),
                            delta=float(delta),
                            **base,
                        )
                    )
    return runs


def metrics_row(report: MetricsReport) -> dict[str, str]:
    row = {
        "protocol": report.protocol,
        "semantics": report.semantics,
        "users": str(report.users),
        "buddies": str(report.buddies),
        "cell_edge": f"{report.cell_edge:g}",
        "delta": f"{report.delta:g}",
        "seed": str(report.seed),
        "precision": f"{report.precision:.6f}",
        "recall": f"{report.recall:.6f}",
        "accuracy": f"{report.accuracy:.6f}",
        "tp": str(report.tp),
        "fp": str(report.fp),
        "tn": str(report.tn),
        "fn": str(report.fn),
        "unknown": str(report.unknown),
        "updates_sent": str(report.updates_sent),
        "requests_sent": str(report.requests_sent),
        "mean_uncertainty_km2": f"{report.mean_uncertainty_km2:.6f}",
    }
    for fam in TRAFFIC_FAMILIES:
        traffic = report.traffic.get(fam)
        row[f"frames_{fam}"] = str(traffic.frames if traffic else 0)
        row[f"bytes_{fam}"] = str(traffic.total_bytes if traffic else 0)
    return row


def write_metrics_csv(path: Path, reports: list[MetricsReport]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for report in reports:
            writer.writerow(metrics_row(report))


def write_events_jsonl(path: Path, records: list[AnswerRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(
                json.dumps(
                    {
                        "time": r.time,
                        "requester": r.requester,
                        "buddy": r.buddy,
                        "truth": r.truth,
                        "reported": r.reported,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def cmd_simulate(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.manifest)
    seed = int(manifest.get("seed", 0))
    if "PROXGUARD_SEED" in os.environ:
        try:
            seed = int(os.environ["PROXGUARD_SEED"])
        except ValueError:
            raise ValueError("PROXGUARD_SEED must be an integer") from None
    out_dir = Path(args.out_dir or manifest.get("out_dir", "out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    for index, config in enumerate(manifest_runs(manifest, seed)):
        report, records = run_scenario(config)
        reports.append(report)
        if args.events:
            write_events_jsonl(out_dir / f"events-{index:03d}.jsonl", records)
        print(
            f"run {index}: {report.protocol} buddies={report.buddies} "
            f"l={report.cell_edge:g} delta={report.delta:g} "
            f"precision={report.precision:.3f} recall={report.recall:.3f}"
        )
    write_metrics_csv(out_dir / "metrics.csv", reports)
    print(f"wrote {out_dir / 'metrics.csv'}")
    return 0


# -- analyze -----------------------------------------------------------------


def _parse_ratio_list(text: str) -> list[float]:
    try:
        ratios = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ValueError("ratios must be a comma-separated list of numbers") from None
    if not ratios or any(r <= 0 for r in ratios):
        raise ValueError("ratios must be positive")
    return ratios


def cmd_analyze(args: argparse.Namespace) -> int:
    ratios = _parse_ratio_list(args.ratios)
    semantics_list = [Semantics(s.strip()) for s in args.semantics.split(",") if s.strip()]
    if not semantics_list:
        raise ValueError("no semantics selected")
    rows = analytics.curve_rows(ratios, semantics_list, trials=args.trials, seed=args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    figures = [
        ("fig8.csv", "precision", lambda row: f"{row['precision']:.6f}"),
        ("fig9.csv", "recall", lambda row: f"{row['recall']:.6f}"),
        ("fig10.csv", "uncertainty_bound", lambda row: str(row["uncertainty_bound"])),
    ]
    for filename, column, fmt in figures:
        with open(out_dir / filename, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["ratio", "semantics", column])
            for row in rows:
                writer.writerow([f"{row['ratio']:g}", row["semantics"], fmt(row)])
    print(f"wrote fig8.csv fig9.csv fig10.csv to {out_dir}")
    return 0


# -- serve -------------------------------------------------------------------


class _Handler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        core: LocationServer = self.server.core  # type: ignore[attr-defined]
        while True:
            try:
                frame = read_frame(self.rfile)
            except FrameError as exc:
                write_frame(self.wfile, ErrorFrame(3, str(exc)))
                return
            if frame is None:
                return
            write_frame(self.wfile, core.handle_frame(frame))
            self.wfile.flush()


class _TcpServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


def build_tcp_server(host: str, port: int, graph: BuddyGraph) -> _TcpServer:
    server = _TcpServer((host, port), _Handler)
    server.core = LocationServer(graph)  # type: ignore[attr-defined]
    return server


def cmd_serve(args: argparse.Namespace) -> int:
    config = _load_json(args.config)
    for field in ("host", "port", "graph"):
        if field not in config:
            raise ValueError(f"server config needs '{field}'")
    graph = BuddyGraph.from_text(_read_text(config["graph"]))
    server = build_tcp_server(config["host"], int(config["port"]), graph)

    def _terminate(signum, frame):
        raise SystemExit(0)

    signal.signal(signal.SIGTERM, _terminate)
    signal.signal(signal.SIGINT, _terminate)
    host, port = server.server_address[:2]
    print(f"listening on {host}:{port}", flush=True)
    try:
        server.serve_forever(poll_interval=0.1)
    finally:
        server.server_close()
    return 0


# -- client ------------------------------------------------------------------


def _verdict_word(value: bool | None) -> str:
    if value is None:
        return "unknown"
    return "in" if value else "out"


def cmd_client(args: argparse.Namespace) -> int:
    config = _load_json(args.config)
    for field in ("host", "port", "user_id", "keys", "graph", "trace", "protocol",
                  "delta", "granularity"):
        if field not in config:
            raise ValueError(f"client config needs '{field}'")
    protocol = SimProtocol(config["protocol"])
    if protocol not in (SimProtocol.SEEK, SimProtocol.HASH):
        raise ValueError("client protocol must be c-hide-seek or c-hide-hash")
    user_id = config["user_id"]
    keys = parse_key_file(_read_text(config["keys"]))
    graph = BuddyGraph.from_text(_read_text(config["graph"]))
    grid = parse_granularity(config["granularity"])
    semantics = Semantics(config.get("semantics", "min-dist"))
    profile = PrivacyProfile(user_id, grid, float(config["delta"]), semantics)
    if user_id not in keys:
        raise ValueError(f"no key for {user_id!r} in key file")
    buddies = [
        BuddyInfo(b, keys[b], grid) for b in graph.buddies_of(user_id) if b in keys
    ]
    trajectories = {
        t.user_id: t
        for t in ingest_traces(
            _read_text(config["trace"]),
            bounds=(grid.origin_x, grid.origin_y,
                    grid.origin_x + grid.width, grid.origin_y + grid.height),
        )
    }
    if user_id not in trajectories:
        raise ValueError(f"trace has no samples for {user_id!r}")
    trajectory = trajectories[user_id]
    period = float(config.get("update_interval", 240.0))
    request_period = float(config.get("request_period", 600.0))
    schedule = UpdateSchedule(period, float(config.get("update_offset", 0.0)))
    t_start, t_end = trajectory.times[0], trajectory.times[-1]

    events: list[tuple[float, int]] = []
    t = schedule.next_update_time(t_start - 1e-9)
    while t <= t_end:
        events.append((t, 0))
        t += period
    t = period + float(config.get("request_offset", 0.0))
    while t <= t_end:
        if t >= t_start:
            events.append((t, 1))
        t += request_period
    events.sort()

    mode = PayloadMode.SEEK if protocol is SimProtocol.SEEK else PayloadMode.HASH
    with socket.create_connection((config["host"], int(config["port"]))) as sock:
        rfile = sock.makefile("rb")
        wfile = sock.makefile("wb")
        for when, kind in events:
            position = trajectory.position_at(when)
            if kind == 0:
                update = build_location_update(
                    profile, keys[user_id], position, schedule.interval_of(when), mode
                )
                write_frame(wfile, update)
                wfile.flush()
                reply = read_frame(rfile)
                if not isinstance(reply, Ack):
                    raise ValueError(f"update rejected: {reply}")
                continue
            if protocol is SimProtocol.SEEK:
                write_frame(wfile, build_seek_request(user_id))
                wfile.flush()
                reply = read_frame(rfile)
                if not isinstance(reply, SeekResponse):
                    raise ValueError(f"request rejected: {reply}")
                key_map = {b.buddy_id: b.shared_key for b in buddies}
                verdicts = [
                    decide_seek(entry, key_map[entry.buddy_id], grid, profile, position)
                    for entry in reply.entries
                    if entry.buddy_id in key_map
                ]
                for missing in reply.unknown:
                    print(f"{when:g} {missing} unknown")
            else:
                pending = build_hash_request(
                    profile, position, buddies, schedule.last_completed(when)
                )
                write_frame(wfile, pending.request)
                wfile.flush()
                reply = read_frame(rfile)
                if not isinstance(reply, HashResponse):
                    raise ValueError(f"request rejected: {reply}")
                verdicts = decide_hash(reply, pending)
            for verdict in sorted(verdicts, key=lambda v: v.buddy_id):
                print(f"{when:g} {verdict.buddy_id} {_verdict_word(verdict.in_proximity)}")
    return 0


# -- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="proxguard",
        description="Privacy-preserving proximity detection toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", help="generate shared keys for a buddy graph")
    p.add_argument("--graph", required=True, help="buddy graph file")
    p.add_argument("--out", required=True, help="output key file")
    p.add_argument("--seed", type=int, default=None, help="deterministic key stream")
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("simulate", help="run the scenarios of a manifest")
    p.add_argument("--manifest", required=True, help="JSON run manifest")
    p.add_argument("--out-dir", default=None, help="override manifest out_dir")
    p.add_argument("--events", action="store_true", help="write per-run events JSONL")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", help="write the precision/recall/privacy curves")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--ratios", default="1,2,3,4,5,6,7,8,9,10",
                   help="comma-separated delta/cell-edge ratios")
    p.add_argument("--semantics", default="min-dist,max-dist,mostly")
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("serve", help="run a live location server")
    p.add_argument("--config", required=True, help="JSON server config")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("client", help="replay a trace against a live server")
    p.add_argument("--config", required=True, help="JSON client config")
    p.set_defaults(func=cmd_client)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
