"""Client-side protocol engine: messages, schedules, request building/decisions.

Location updates are emitted once per update interval at a fixed per-user
offset, so emission times carry no information about movement.  Two proximity
request protocols are supported:

* seek: the server returns each buddy's stored (encrypted) granule; the
  requester decrypts it and decides proximity locally, learning the granule.
* hash: the requester sends, per buddy, a commutatively-encrypted set of hashed
  candidate granules padded to an agreed size; the server re-blinds the set and
  the buddy's stored hashed granule; the requester learns only set membership.
"""

from __future__ import annotations

import math
import random
import secrets
import struct
from dataclasses import dataclass, field
from enum import IntEnum

from .crypto import (
    DEFAULT_GROUP,
    CommutativeGroup,
    KeyUsageLedger,
    derive_interval_key,
    decrypt_index,
    encrypt_index,
    gen_session_key,
    salted_hash,
)
from .granularity import (
    GridGranularity,
    Point,
    Semantics,
    candidate_bound,
    covered_fraction,
    max_dist,
    max_travel_time,
    min_dist,
    proximity_candidates,
)

_PLAIN = struct.Struct("!dd")


class ProtocolError(ValueError):
    """Malformed or inconsistent protocol message."""


class PayloadMode(IntEnum):
    SEEK = 0  # encrypted granule index
    HASH = 1  # salted hash of the granule index
    PLAIN = 2  # unprotected payload, used only by baseline protocols


@dataclass(frozen=True)
class LocationUpdate:
    user_id: str
    interval: int
    mode: PayloadMode
    payload: bytes


@dataclass(frozen=True)
class SeekRequest:
    requester: str


@dataclass(frozen=True)
class SeekEntry:
    buddy_id: str
    interval: int
    mode: PayloadMode
    payload: bytes


@dataclass(frozen=True)
class SeekResponse:
    entries: tuple[SeekEntry, ...]
    unknown: tuple[str, ...] = ()


@dataclass(frozen=True)
class HashRequestEntry:
    buddy_id: str
    interval: int
    candidates: tuple[int, ...]


@dataclass(frozen=True)
class HashRequest:
    requester: str
    entries: tuple[HashRequestEntry, ...]


@dataclass(frozen=True)
class HashResponseEntry:
    buddy_id: str
    known: bool
    candidates: tuple[int, ...] = ()
    reported: int | None = None


@dataclass(frozen=True)
class HashResponse:
    entries: tuple[HashResponseEntry, ...]


@dataclass(frozen=True)
class Ack:
    status: int = 0


@dataclass(frozen=True)
class ErrorFrame:
    code: int
    message: str


@dataclass(frozen=True)
class PrivacyProfile:
    user_id: str
    grid: GridGranularity
    delta: float
    semantics: Semantics
    max_speed: float | None = None

    def __post_init__(self) -> None:
        if self.delta < 0:
            raise ValueError("delta must be non-negative")


@dataclass(frozen=True)
class BuddyInfo:
    buddy_id: str
    shared_key: bytes
    grid: GridGranularity


@dataclass(frozen=True)
class ProximityVerdict:
    """Outcome for one buddy.  `in_proximity is None` means the server had no
    stored update for the buddy.  `uncertainty_region` is the set of granules
    of the buddy's grid consistent with the answer from the requester's view.
    """

    buddy_id: str
    in_proximity: bool | None
    disclosed_granule: int | None = None
    uncertainty_region: frozenset[int] = frozenset()


@dataclass(frozen=True)
class UpdateSchedule:
    """One update per interval of length `period`, at offset `offset`."""

    period: float
    offset: float

    def __post_init__(self) -> None:
        if self.period <= 0:
            raise ValueError("period must be positive")
        if not 0 <= self.offset < self.period:
            raise ValueError("offset must lie in [0, period)")

    def update_time(self, interval: int) -> float:
        return interval * self.period + self.offset

    def interval_of(self, t: float) -> int:
        return int(math.floor(t / self.period))

    def last_completed(self, t: float) -> int:
        return self.interval_of(t) - 1

    def next_update_time(self, now: float) -> float:
        i = int(math.floor((now - self.offset) / self.period)) + 1
        return self.update_time(max(0, i))

    def emission_times(self, t_end: float, t_start: float = 0.0) -> list[float]:
        """All update times in [t_start, t_end); independent of any trajectory."""
        first = max(0, int(math.ceil((t_start - self.offset) / self.period)))
        out = []
        i = first
        while self.update_time(i) < t_end:
            if self.update_time(i) >= t_start:
                out.append(self.update_time(i))
            i += 1
        return out


@dataclass
class _GuardPair:
    g1: int
    g2: int
    deadline: float


class VelocityGuard:
    """Hides granule-boundary crossings that would reveal a tight position.

    After a crossing g1 -> g2, report g1 or g2 with probability 1/2 each until
    the maximum travel time between the two granules has elapsed since the last
    update sent from g1; only then report the new granule deterministically.
    Crossing into a third granule restarts the guard with the new pair.
    """

    def __init__(self, grid: GridGranularity, max_speed: float):
        if max_speed <= 0:
            raise ValueError("max_speed must be positive")
        self._grid = grid
        self._speed = max_speed
        self._last_granule: int | None = None
        self._last_time = 0.0
        self._pair: _GuardPair | None = None

    def report(self, g_now: int, now: float, rng: random.Random) -> int:
        pair = self._pair
        if pair is not None and now >= pair.deadline:
            pair = self._pair = None
        if pair is None:
            if self._last_granule is not None and g_now != self._last_granule:
                deadline = self._last_time + max_travel_time(
                    self._grid, self._last_granule, g_now, self._speed
                )
                if now < deadline:
                    pair = self._pair = _GuardPair(self._last_granule, g_now, deadline)
        elif g_now not in (pair.g1, pair.g2):
            deadline = self._last_time + max_travel_time(
                self._grid, pair.g2, g_now, self._speed
            )
            pair = self._pair = (
                _GuardPair(pair.g2, g_now, deadline) if now < deadline else None
            )
        reported = rng.choice((pair.g1, pair.g2)) if pair is not None else g_now
        self._last_granule = g_now
        self._last_time = now
        return reported


def build_location_update(
    profile: PrivacyProfile,
    shared_key: bytes,
    position: Point,
    interval: int,
    mode: PayloadMode,
    *,
    now: float | None = None,
    guard: VelocityGuard | None = None,
    rng: random.Random | None = None,
    ledger: KeyUsageLedger | None = None,
) -> LocationUpdate:
    if mode is PayloadMode.PLAIN:
        return LocationUpdate(
            profile.user_id, interval, mode, _PLAIN.pack(position.x, position.y)
        )
    granule = profile.grid.granule_of(position)
    if guard is not None:
        if now is None:
            raise ValueError("velocity guard needs the current time")
        granule = guard.report(granule, now, rng or secrets.SystemRandom())
    key = derive_interval_key(shared_key, interval)
    if ledger is not None:
        ledger.record(key)
    if mode is PayloadMode.SEEK:
        payload = encrypt_index(key, granule)
    else:
        payload = salted_hash(key, granule)
    return LocationUpdate(profile.user_id, interval, mode, payload)


def parse_plain_payload(payload: bytes) -> Point:
    if len(payload) != _PLAIN.size:
        raise ProtocolError("malformed plaintext position payload")
    return Point(*_PLAIN.unpack(payload))


def build_seek_request(requester: str) -> SeekRequest:
    """The seek request discloses nothing: it only names the requester."""
    return SeekRequest(requester)


def decide_seek(
    entry: SeekEntry,
    buddy_key: bytes,
    buddy_grid: GridGranularity,
    profile: PrivacyProfile,
    position: Point,
) -> ProximityVerdict:
    """Decrypt a buddy's stored granule and decide proximity locally."""
    if entry.mode is PayloadMode.PLAIN:
        buddy_pos = parse_plain_payload(entry.payload)
        return ProximityVerdict(
            entry.buddy_id, position.distance_to(buddy_pos) <= profile.delta
        )
    if entry.mode is not PayloadMode.SEEK:
        raise ProtocolError(f"cannot decide a {entry.mode.name} payload locally")
    key = derive_interval_key(buddy_key, entry.interval)
    granule = decrypt_index(key, entry.payload)
    try:
        buddy_grid.check_index(granule)
    except ValueError as exc:
        raise ProtocolError("decrypted granule outside the buddy's grid") from exc
    if profile.semantics is Semantics.MIN_DIST:
        near = min_dist(position, buddy_grid, granule) <= profile.delta
    elif profile.semantics is Semantics.MAX_DIST:
        near = max_dist(position, buddy_grid, granule) <= profile.delta
    else:
        near = covered_fraction(position, buddy_grid, granule, profile.delta) >= 0.5
    return ProximityVerdict(
        entry.buddy_id, near, disclosed_granule=granule,
        uncertainty_region=frozenset((granule,)),
    )


@dataclass(frozen=True)
class CandidateSet:
    """Client-side record of one buddy's request entry before encryption."""

    buddy_id: str
    grid: GridGranularity
    valid: frozenset[int]
    padding: frozenset[int]


@dataclass
class PendingHashRequest:
    """A built hash request plus the secrets needed to read its response."""

    request: HashRequest
    session_key: int
    group: CommutativeGroup
    candidates: dict[str, CandidateSet] = field(default_factory=dict)


def build_hash_request(
    profile: PrivacyProfile,
    position: Point,
    buddies: list[BuddyInfo],
    interval: int,
    *,
    group: CommutativeGroup = DEFAULT_GROUP,
    rng: random.Random | None = None,
) -> PendingHashRequest:
    """Build one request entry per buddy for the given (completed) interval.

    Every entry carries exactly `candidate_bound` elements: the valid candidate
    granules for the active semantics, plus random non-granule padding indexes,
    hashed under the buddy's interval key and encrypted under a fresh session
    exponent.  Cardinality and order therefore reveal nothing about position.
    """
    if rng is None:
        rng = secrets.SystemRandom()
    session_key = gen_session_key(group, rng)
    pending = PendingHashRequest(HashRequest(profile.user_id, ()), session_key, group)
    entries = []
    order = list(buddies)
    rng.shuffle(order)
    for buddy in order:
        valid = proximity_candidates(position, buddy.grid, profile.delta, profile.semantics)
        bound = candidate_bound(buddy.grid, profile.delta)
        if len(valid) > bound:
            raise AssertionError(
                f"candidate set ({len(valid)}) exceeded agreed bound ({bound})"
            )
        n = buddy.grid.cell_count
        padding = rng.sample(range(n, 2 * n), bound - len(valid))
        mixed = list(valid) + padding
        rng.shuffle(mixed)
        key = derive_interval_key(buddy.shared_key, interval)
        sealed = tuple(
            group.encrypt(session_key, group.digest_to_element(salted_hash(key, i)))
            for i in mixed
        )
        entries.append(HashRequestEntry(buddy.buddy_id, interval, sealed))
        pending.candidates[buddy.buddy_id] = CandidateSet(
            buddy.buddy_id, buddy.grid, valid, frozenset(padding)
        )
    pending.request = HashRequest(profile.user_id, tuple(entries))
    return pending


def decide_hash(response: HashResponse, pending: PendingHashRequest) -> list[ProximityVerdict]:
    """Decide proximity per buddy from the re-blinded response.

    In proximity iff the buddy's doubly-encrypted granule hash appears among
    the doubly-encrypted candidates; the requester never learns which granule.
    """
    group = pending.group
    verdicts = []
    for entry in response.entries:
        cand = pending.candidates.get(entry.buddy_id)
        if cand is None:
            raise ProtocolError(f"response names unrequested buddy {entry.buddy_id!r}")
        if not entry.known:
            verdicts.append(ProximityVerdict(entry.buddy_id, None))
            continue
        expected = len(cand.valid) + len(cand.padding)
        if len(entry.candidates) != expected or entry.reported is None:
            raise ProtocolError(f"malformed response entry for {entry.buddy_id!r}")
        sealed = group.encrypt(pending.session_key, entry.reported)
        near = sealed in set(entry.candidates)
        if near:
            region = cand.valid
        else:
            region = frozenset(range(cand.grid.cell_count)) - cand.valid
        verdicts.append(ProximityVerdict(entry.buddy_id, near, uncertainty_region=region))
    return verdicts
