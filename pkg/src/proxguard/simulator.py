"""Deterministic discrete-event simulator for the proximity protocols.

Given a seeded scenario, generates random-waypoint trajectories, runs the
location-update and proximity-request schedules through the real protocol and
wire stack against an in-process server, and scores every answer against
ground truth computed from exact positions at the request instant.
"""

from __future__ import annotations

import math
import random
from bisect import bisect_right
from dataclasses import dataclass, field
from enum import Enum

from .crypto import DEFAULT_GROUP, CommutativeGroup, KeyUsageLedger, gen_shared_key
from .granularity import GridGranularity, Point, Semantics
from .protocol import (
    BuddyInfo,
    HashResponse,
    LocationUpdate,
    PayloadMode,
    PrivacyProfile,
    ProtocolError,
    ProximityVerdict,
    SeekEntry,
    SeekRequest,
    SeekResponse,
    UpdateSchedule,
    VelocityGuard,
    build_hash_request,
    build_location_update,
    build_seek_request,
    decide_hash,
    decide_seek,
)
from .server import BuddyGraph, LocationServer
from .transport import ChannelEnd, CostLedger, Traffic, simulated_channel

TRACE_HEADER = "#proxtrace v1"


class TraceFormatError(ValueError):
    """Trace file violates the format, with the offending line number."""


class SimProtocol(str, Enum):
    NAIVE = "naive"
    SEEK = "c-hide-seek"
    HASH = "c-hide-hash"
    PIERRE = "pierre-baseline"


@dataclass(frozen=True)
class Trajectory:
    user_id: str
    times: tuple[float, ...]
    xs: tuple[float, ...]
    ys: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.times) != len(self.xs) or len(self.times) != len(self.ys):
            raise ValueError("sample arrays must have equal length")
        if not self.times:
            raise ValueError("trajectory needs at least one sample")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("sample times must increase strictly")

    def position_at(self, t: float) -> Point:
        """Linear interpolation between samples, clamped to the span."""
        times = self.times
        if t <= times[0]:
            return Point(self.xs[0], self.ys[0])
        if t >= times[-1]:
            return Point(self.xs[-1], self.ys[-1])
        i = bisect_right(times, t)
        f = (t - times[i - 1]) / (times[i] - times[i - 1])
        return Point(
            self.xs[i - 1] + f * (self.xs[i] - self.xs[i - 1]),
            self.ys[i - 1] + f * (self.ys[i] - self.ys[i - 1]),
        )


def random_waypoint(
    user_ids: list[str],
    width: float,
    height: float,
    duration: float,
    sample_period: float,
    speed_min: float,
    speed_max: float,
    pause_max: float,
    rng: random.Random,
) -> list[Trajectory]:
    """Random-waypoint trajectories sampled every `sample_period` seconds."""
    if sample_period <= 0 or duration < 0:
        raise ValueError("sample_period must be positive and duration non-negative")
    if not 0 < speed_min <= speed_max:
        raise ValueError("need 0 < speed_min <= speed_max")
    out = []
    for user in user_ids:
        x = rng.uniform(0.0, width)
        y = rng.uniform(0.0, height)
        times = [0.0]
        xs = [x]
        ys = [y]
        t = 0.0
        next_sample = sample_period
        while next_sample <= duration + 1e-9:
            wx = rng.uniform(0.0, width)
            wy = rng.uniform(0.0, height)
            speed = rng.uniform(speed_min, speed_max)
            leg = math.hypot(wx - x, wy - y) / speed
            while next_sample <= t + leg and next_sample <= duration + 1e-9:
                f = (next_sample - t) / leg
                times.append(next_sample)
                xs.append(x + f * (wx - x))
                ys.append(y + f * (wy - y))
                next_sample += sample_period
            t += leg
            x, y = wx, wy
            pause = rng.uniform(0.0, pause_max) if pause_max > 0 else 0.0
            while next_sample <= t + pause and next_sample <= duration + 1e-9:
                times.append(next_sample)
                xs.append(x)
                ys.append(y)
                next_sample += sample_period
            t += pause
        out.append(Trajectory(user, tuple(times), tuple(xs), tuple(ys)))
    return out


def export_traces(trajectories: list[Trajectory]) -> str:
    lines = [TRACE_HEADER]
    for traj in sorted(trajectories, key=lambda tr: tr.user_id):
        for t, x, y in zip(traj.times, traj.xs, traj.ys):
            lines.append(f"{traj.user_id},{t!r},{x!r},{y!r}")
    return "\n".join(lines) + "\n"


def ingest_traces(
    text: str, bounds: tuple[float, float, float, float] | None = None
) -> list[Trajectory]:
    """Parse a trace file; `bounds` optionally validates (xmin, ymin, xmax, ymax)."""
    lines = text.splitlines()
    if not lines or lines[0].strip() != TRACE_HEADER:
        raise TraceFormatError(f"line 1: expected header {TRACE_HEADER!r}")
    samples: dict[str, list[tuple[float, float, float]]] = {}
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise TraceFormatError(f"line {lineno}: expected user,t,x,y")
        user = parts[0].strip()
        if not user:
            raise TraceFormatError(f"line {lineno}: empty user id")
        try:
            t, x, y = (float(v) for v in parts[1:])
        except ValueError:
            raise TraceFormatError(f"line {lineno}: non-numeric field") from None
        if not all(math.isfinite(v) for v in (t, x, y)):
            raise TraceFormatError(f"line {lineno}: non-finite field")
        if bounds is not None:
            xmin, ymin, xmax, ymax = bounds
            if not (xmin <= x <= xmax and ymin <= y <= ymax):
                raise TraceFormatError(f"line {lineno}: position outside domain")
        rows = samples.setdefault(user, [])
        if rows and t <= rows[-1][0]:
            raise TraceFormatError(f"line {lineno}: non-increasing timestamp")
        rows.append((t, x, y))
    out = []
    for user in sorted(samples):
        rows = samples[user]
        out.append(
            Trajectory(
                user,
                tuple(r[0] for r in rows),
                tuple(r[1] for r in rows),
                tuple(r[2] for r in rows),
            )
        )
    return out


@dataclass(frozen=True)
class ScenarioConfig:
    users: int = 200
    buddies: int = 20
    domain_width: float = 4000.0
    domain_height: float = 4000.0
    cell_edge: float = 200.0
    delta: float = 400.0
    update_interval: float = 240.0
    request_period: float = 600.0
    duration: float = 14400.0
    sample_period: float = 120.0
    protocol: SimProtocol = SimProtocol.SEEK
    semantics: Semantics = Semantics.MIN_DIST
    seed: int = 0
    speed_min: float = 0.5
    speed_max: float = 2.0
    pause_max: float = 60.0
    latency: float = 0.0
    time_approximation: bool = True
    update_offset: float | None = None  # None: per-user seeded uniform in [0, T)
    request_offset: float | None = None  # None: per-user seeded uniform in [0, P)
    max_speed: float | None = None  # enables the velocity guard when set

    def validate(self) -> None:
        if self.users < 2:
            raise ValueError("need at least two users")
        if not 1 <= self.buddies < self.users:
            raise ValueError("buddies must be in [1, users)")
        if self.delta < 0:
            raise ValueError("delta must be non-negative")
        for name in ("update_interval", "request_period", "sample_period", "cell_edge"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.duration <= 0 or self.latency < 0:
            raise ValueError("duration must be positive, latency non-negative")
        for size in (self.domain_width, self.domain_height):
            cells = size / self.cell_edge
            if abs(cells - round(cells)) > 1e-9 or round(cells) < 1:
                raise ValueError("domain size must be a whole number of cells")
        if self.update_offset is not None and not 0 <= self.update_offset < self.update_interval:
            raise ValueError("update_offset must lie in [0, update_interval)")
        if self.request_offset is not None and not 0 <= self.request_offset < self.request_period:
            raise ValueError("request_offset must lie in [0, request_period)")

    def grid(self) -> GridGranularity:
        return GridGranularity(
            0.0,
            0.0,
            self.cell_edge,
            round(self.domain_width / self.cell_edge),
            round(self.domain_height / self.cell_edge),
        )


@dataclass(frozen=True)
class AnswerRecord:
    time: float
    requester: str
    buddy: str
    truth: bool
    reported: bool | None  # None when the server had no stored update


@dataclass
class MetricsReport:
    protocol: str
    semantics: str
    users: int
    buddies: int
    cell_edge: float
    delta: float
    seed: int
    precision: float
    recall: float
    accuracy: float
    tp: int
    fp: int
    tn: int
    fn: int
    unknown: int
    updates_sent: int
    requests_sent: int
    mean_uncertainty_km2: float
    traffic: dict[str, Traffic] = field(default_factory=dict)
    key_reuse: int = 0


def pierre_grid(config: ScenarioConfig) -> GridGranularity:
    """Plaintext comparison grid with cell edge equal to the threshold."""
    return GridGranularity(
        0.0,
        0.0,
        config.delta,
        max(1, math.ceil(config.domain_width / config.delta)),
        max(1, math.ceil(config.domain_height / config.delta)),
    )


def pierre_cells_adjacent(grid: GridGranularity, a: int, b: int) -> bool:
    """Same cell or one of the 8 neighbours."""
    grid.check_index(a)
    grid.check_index(b)
    arow, acol = divmod(a, grid.cols)
    brow, bcol = divmod(b, grid.cols)
    return abs(arow - brow) <= 1 and abs(acol - bcol) <= 1


@dataclass
class _UserState:
    user_id: str
    trajectory: Trajectory
    profile: PrivacyProfile
    shared_key: bytes
    schedule: UpdateSchedule
    channel: ChannelEnd
    server_end: ChannelEnd
    buddies: list[BuddyInfo]
    guard: VelocityGuard | None = None


class _Scenario:
    """Mutable state for one simulated run."""

    def __init__(self, config: ScenarioConfig, group: CommutativeGroup):
        config.validate()
        self.config = config
        self.group = group
        self.grid = config.grid()
        self.pgrid = pierre_grid(config)
        seed = config.seed
        self.rng_proto = random.Random(f"{seed}:protocol")
        self.rng_guard = random.Random(f"{seed}:guard")
        rng_traj = random.Random(f"{seed}:trajectories")
        rng_graph = random.Random(f"{seed}:graph")
        rng_keys = random.Random(f"{seed}:keys")
        rng_sched = random.Random(f"{seed}:schedule")

        user_ids = [f"u{i:04d}" for i in range(config.users)]
        trajectories = random_waypoint(
            user_ids,
            config.domain_width,
            config.domain_height,
            config.duration,
            config.sample_period,
            config.speed_min,
            config.speed_max,
            config.pause_max,
            rng_traj,
        )
        mapping = {
            user: tuple(sorted(rng_graph.sample([u for u in user_ids if u != user], config.buddies)))
            for user in user_ids
        }
        self.graph = BuddyGraph(mapping)
        keys = {user: gen_shared_key(rng_keys) for user in user_ids}

        self.ledger = CostLedger()
        self.usage = KeyUsageLedger()
        self.server = LocationServer(self.graph, group=group, rng=self.rng_proto)
        self.users: dict[str, _UserState] = {}
        for user, traj in zip(user_ids, trajectories):
            offset = (
                config.update_offset
                if config.update_offset is not None
                else rng_sched.uniform(0.0, config.update_interval)
            )
            end, server_end = simulated_channel(
                user, "sp", ledger=self.ledger, latency=config.latency
            )
            profile = PrivacyProfile(
                user, self.grid, config.delta, config.semantics, config.max_speed
            )
            guard = None
            if config.max_speed is not None and config.protocol in (
                SimProtocol.SEEK,
                SimProtocol.HASH,
            ):
                guard = VelocityGuard(self.grid, config.max_speed)
            self.users[user] = _UserState(
                user,
                traj,
                profile,
                keys[user],
                UpdateSchedule(config.update_interval, offset),
                end,
                server_end,
                [BuddyInfo(b, keys[b], self.grid) for b in mapping[user]],
                guard,
            )
        self.request_offsets = {
            user: (
                config.request_offset
                if config.request_offset is not None
                else rng_sched.uniform(0.0, config.request_period)
            )
            for user in user_ids
        }
        self.records: list[AnswerRecord] = []
        self.updates_sent = 0
        self.requests_sent = 0
        self.positive_area_m2: list[float] = []

    # -- wire helpers ---------------------------------------------------

    def _exchange(self, state: _UserState, frame, now: float, server: LocationServer):
        lat = self.config.latency
        state.channel.send(frame, now)
        inbound = state.server_end.recv(now + lat)
        reply = server.handle_frame(inbound)
        state.server_end.send(reply, now + lat)
        return state.channel.recv(now + 2 * lat)

    # -- events ---------------------------------------------------------

    def send_update(self, state: _UserState, interval: int, now: float) -> None:
        mode = {
            SimProtocol.SEEK: PayloadMode.SEEK,
            SimProtocol.HASH: PayloadMode.HASH,
            SimProtocol.NAIVE: PayloadMode.PLAIN,
        }[self.config.protocol]
        update = build_location_update(
            state.profile,
            state.shared_key,
            state.trajectory.position_at(now),
            interval,
            mode,
            now=now,
            guard=state.guard,
            rng=self.rng_guard,
            ledger=self.usage,
        )
        self._exchange(state, update, now, self.server)
        self.updates_sent += 1

    def _answer_server(self, now: float, wanted: list[tuple[str, int, PayloadMode]]) -> LocationServer:
        """Server to answer from: the live one, or a throwaway built from
        current positions when the time approximation is disabled."""
        if self.config.time_approximation:
            return self.server
        fresh = LocationServer(self.graph, group=self.group, rng=self.rng_proto)
        for buddy_id, interval, mode in wanted:
            buddy = self.users[buddy_id]
            pos = buddy.trajectory.position_at(now)
            fresh.store.put(
                build_location_update(
                    buddy.profile, buddy.shared_key, pos, interval, mode
                )
            )
        return fresh

    def send_request(self, state: _UserState, now: float) -> None:
        proto = self.config.protocol
        self.requests_sent += 1
        position = state.trajectory.position_at(now)
        if proto is SimProtocol.PIERRE:
            self._pierre_request(state, position, now)
            return
        if proto is SimProtocol.HASH:
            interval = state.schedule.last_completed(now)
            pending = build_hash_request(
                state.profile,
                position,
                state.buddies,
                interval,
                group=self.group,
                rng=self.rng_proto,
            )
            server = self._answer_server(
                now, [(b.buddy_id, interval, PayloadMode.HASH) for b in state.buddies]
            )
            reply = self._exchange(state, pending.request, now, server)
            if not isinstance(reply, HashResponse):
                raise ProtocolError(f"unexpected reply {type(reply).__name__}")
            verdicts = decide_hash(reply, pending)
        else:
            mode = PayloadMode.SEEK if proto is SimProtocol.SEEK else PayloadMode.PLAIN
            server = self._answer_server(
                now,
                [
                    (b.buddy_id, self.users[b.buddy_id].schedule.interval_of(now), mode)
                    for b in state.buddies
                ],
            )
            reply = self._exchange(state, build_seek_request(state.user_id), now, server)
            if not isinstance(reply, SeekResponse):
                raise ProtocolError(f"unexpected reply {type(reply).__name__}")
            keys = {b.buddy_id: b.shared_key for b in state.buddies}
            verdicts = [
                decide_seek(entry, keys[entry.buddy_id], self.grid, state.profile, position)
                for entry in reply.entries
            ]
            # no stored update yet for these buddies
            verdicts.extend(ProximityVerdict(b, None) for b in reply.unknown)
        self._score(state, position, verdicts, now)

    def _pierre_request(self, state: _UserState, position: Point, now: float) -> None:
        """Four frames per buddy, all via the provider: request in, forward to
        the buddy, the buddy's plaintext cell back, forward to the requester."""
        own_cell = self.pgrid.granule_of(position)
        verdicts = []
        for info in state.buddies:
            buddy = self.users[info.buddy_id]
            request = SeekRequest(state.user_id)
            state.channel.send(request, now)
            state.server_end.recv(now)
            buddy.server_end.send(request, now)
            buddy.channel.recv(now)
            cell = self.pgrid.granule_of(buddy.trajectory.position_at(now))
            reply = LocationUpdate(
                info.buddy_id, 0, PayloadMode.PLAIN, cell.to_bytes(8, "big")
            )
            buddy.channel.send(reply, now)
            buddy.server_end.recv(now)
            entry = SeekEntry(info.buddy_id, 0, PayloadMode.PLAIN, cell.to_bytes(8, "big"))
            state.server_end.send(SeekResponse((entry,)), now)
            answer = state.channel.recv(now)
            assert isinstance(answer, SeekResponse)
            got = int.from_bytes(answer.entries[0].payload, "big")
            near = pierre_cells_adjacent(self.pgrid, own_cell, got)
            verdicts.append(ProximityVerdict(info.buddy_id, near))
        self._score(state, position, verdicts, now)

    def _score(self, state, position: Point, verdicts, now: float) -> None:
        config = self.config
        for verdict in verdicts:
            buddy_pos = self.users[verdict.buddy_id].trajectory.position_at(now)
            truth = position.distance_to(buddy_pos) <= config.delta
            self.records.append(
                AnswerRecord(now, state.user_id, verdict.buddy_id, truth, verdict.in_proximity)
            )
            if verdict.in_proximity:
                self.positive_area_m2.append(self._positive_area(verdict))

    def _positive_area(self, verdict) -> float:
        proto = self.config.protocol
        if proto is SimProtocol.NAIVE:
            return 0.0
        if proto is SimProtocol.PIERRE:
            return self.config.delta ** 2
        if proto is SimProtocol.SEEK:
            return self.grid.cell_edge ** 2
        return len(verdict.uncertainty_region) * self.grid.cell_edge ** 2


def run_scenario(
    config: ScenarioConfig, *, group: CommutativeGroup = DEFAULT_GROUP
) -> tuple[MetricsReport, list[AnswerRecord]]:
    """Run one scenario; identical configs produce identical results."""
    sim = _Scenario(config, group)
    events: list[tuple[float, int, int, str, int]] = []
    seq = 0
    if config.protocol is not SimProtocol.PIERRE:
        for user in sorted(sim.users):
            schedule = sim.users[user].schedule
            interval = 0
            while schedule.update_time(interval) < config.duration:
                events.append((schedule.update_time(interval), 0, seq, user, interval))
                seq += 1
                interval += 1
    for user in sorted(sim.users):
        first = config.update_interval + sim.request_offsets[user]
        t = first
        while t < config.duration:
            events.append((t, 1, seq, user, -1))
            seq += 1
            t += config.request_period
    events.sort()
    for time_, kind, _, user, interval in events:
        state = sim.users[user]
        if kind == 0:
            sim.send_update(state, interval, time_)
        else:
            sim.send_request(state, time_)

    tp = sum(1 for r in sim.records if r.reported is True and r.truth)
    fp = sum(1 for r in sim.records if r.reported is True and not r.truth)
    fn = sum(1 for r in sim.records if r.reported is False and r.truth)
    tn = sum(1 for r in sim.records if r.reported is False and not r.truth)
    unknown = sum(1 for r in sim.records if r.reported is None)
    decided = tp + fp + tn + fn
    report = MetricsReport(
        protocol=config.protocol.value,
        semantics=config.semantics.value,
        users=config.users,
        buddies=config.buddies,
        cell_edge=config.cell_edge,
        delta=config.delta,
        seed=config.seed,
        precision=tp / (tp + fp) if tp + fp else 1.0,
        recall=tp / (tp + fn) if tp + fn else 1.0,
        accuracy=(tp + tn) / decided if decided else 1.0,
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        unknown=unknown,
        updates_sent=sim.updates_sent,
        requests_sent=sim.requests_sent,
        mean_uncertainty_km2=(
            sum(sim.positive_area_m2) / len(sim.positive_area_m2) / 1e6
            if sim.positive_area_m2
            else 0.0
        ),
        traffic=sim.ledger.by_family(),
        key_reuse=len(sim.usage.reused),
    )
    return report, sim.records
