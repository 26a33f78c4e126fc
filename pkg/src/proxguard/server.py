"""Untrusted service provider: stores opaque updates, answers blindly.

The server sees only ciphertexts, salted hashes and commutative-group
elements.  It holds no user keys and never derives any: its whole protocol
role is storage, buddy-list lookup, and re-blinding group elements under a
per-request session exponent.
"""

from __future__ import annotations

import random
import threading
from dataclasses import dataclass

from .crypto import DEFAULT_GROUP, CommutativeGroup, gen_session_key
from .protocol import (
    Ack,
    ErrorFrame,
    HashRequest,
    HashResponse,
    HashResponseEntry,
    LocationUpdate,
    PayloadMode,
    ProtocolError,
    SeekEntry,
    SeekRequest,
    SeekResponse,
)

ERR_UNKNOWN_USER = 1
ERR_STALE_UPDATE = 2
ERR_BAD_REQUEST = 3


class StaleUpdateError(Exception):
    """Update for an interval older than the stored one."""


class UnknownUserError(Exception):
    """User is not part of the configured buddy graph."""


@dataclass(frozen=True)
class StoredUpdate:
    interval: int
    mode: PayloadMode
    payload: bytes


class EncryptedLocationStore:
    """Per-user history of the current and previous interval's update.

    Two slots suffice: hash-protocol requests always name the last completed
    interval, which is either the newest or the second-newest stored update.
    """

    def __init__(self) -> None:
        self._slots: dict[str, list[StoredUpdate]] = {}

    def put(self, update: LocationUpdate) -> None:
        slots = self._slots.setdefault(update.user_id, [])
        entry = StoredUpdate(update.interval, update.mode, update.payload)
        if not slots:
            slots.append(entry)
            return
        newest = slots[0].interval
        if update.interval < newest:
            raise StaleUpdateError(
                f"interval {update.interval} older than stored {newest}"
            )
        if update.interval == newest:
            slots[0] = entry
        else:
            slots.insert(0, entry)
            del slots[2:]

    def latest(self, user_id: str) -> StoredUpdate | None:
        slots = self._slots.get(user_id)
        return slots[0] if slots else None

    def at_interval(self, user_id: str, interval: int) -> StoredUpdate | None:
        for entry in self._slots.get(user_id, ()):
            if entry.interval == interval:
                return entry
        return None

    def users(self) -> list[str]:
        return sorted(self._slots)


class BuddyGraph:
    """Static irreflexive buddy lists; only listed pairs may be queried."""

    def __init__(self, mapping: dict[str, tuple[str, ...]]):
        for user, buddies in mapping.items():
            if user in buddies:
                raise ValueError(f"user {user!r} lists itself as a buddy")
        self._mapping = {user: tuple(buddies) for user, buddies in mapping.items()}

    @classmethod
    def from_text(cls, text: str) -> "BuddyGraph":
        """Parse lines of the form `user_id: buddy_id, buddy_id, ...`."""
        mapping: dict[str, tuple[str, ...]] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if ":" not in line:
                raise ValueError(f"line {lineno}: expected 'user: buddy, ...'")
            user, _, rest = line.partition(":")
            user = user.strip()
            if not user:
                raise ValueError(f"line {lineno}: empty user id")
            if user in mapping:
                raise ValueError(f"line {lineno}: duplicate entry for {user!r}")
            buddies = tuple(b.strip() for b in rest.split(",") if b.strip())
            if user in buddies:
                raise ValueError(f"line {lineno}: {user!r} lists itself as a buddy")
            mapping[user] = buddies
        return cls(mapping)

    def to_text(self) -> str:
        lines = [
            f"{user}: {', '.join(self._mapping[user])}" for user in sorted(self._mapping)
        ]
        return "\n".join(lines) + "\n"

    def users(self) -> list[str]:
        return sorted(self._mapping)

    def buddies_of(self, user_id: str) -> tuple[str, ...]:
        try:
            return self._mapping[user_id]
        except KeyError:
            raise UnknownUserError(f"unknown user {user_id!r}") from None

    def knows(self, user_id: str) -> bool:
        return user_id in self._mapping


class LocationServer:
    """Protocol endpoint for the service provider."""

    def __init__(
        self,
        graph: BuddyGraph,
        *,
        group: CommutativeGroup = DEFAULT_GROUP,
        rng: random.Random | None = None,
    ):
        self.graph = graph
        self.store = EncryptedLocationStore()
        self._group = group
        self._rng = rng
        self._lock = threading.Lock()

    def handle_update(self, update: LocationUpdate) -> Ack:
        if not self.graph.knows(update.user_id):
            raise UnknownUserError(f"unknown user {update.user_id!r}")
        with self._lock:
            self.store.put(update)
        return Ack(0)

    def answer_seek(self, request: SeekRequest) -> SeekResponse:
        """Return the most recent stored update of every buddy, unread."""
        buddies = self.graph.buddies_of(request.requester)
        entries = []
        unknown = []
        with self._lock:
            for buddy in buddies:
                stored = self.store.latest(buddy)
                if stored is None:
                    unknown.append(buddy)
                else:
                    entries.append(
                        SeekEntry(buddy, stored.interval, stored.mode, stored.payload)
                    )
        return SeekResponse(tuple(entries), tuple(unknown))

    def answer_hash(self, request: HashRequest) -> HashResponse:
        """Re-blind each entry under a fresh session exponent.

        The re-encrypted candidate sets are returned in sorted order so the
        requester cannot correlate response positions with her own candidate
        order; response entries follow the request's entry order.
        """
        buddies = set(self.graph.buddies_of(request.requester))
        session_key = gen_session_key(self._group, self._rng)
        entries = []
        with self._lock:
            for entry in request.entries:
                if entry.buddy_id not in buddies:
                    raise ProtocolError(
                        f"{entry.buddy_id!r} is not a buddy of {request.requester!r}"
                    )
                for value in entry.candidates:
                    if not self._group.contains(value):
                        raise ProtocolError("candidate outside the cipher group")
                stored = self.store.at_interval(entry.buddy_id, entry.interval)
                if stored is None or stored.mode is not PayloadMode.HASH:
                    entries.append(HashResponseEntry(entry.buddy_id, False))
                    continue
                sealed = tuple(
                    sorted(self._group.encrypt(session_key, v) for v in entry.candidates)
                )
                reported = self._group.encrypt(
                    session_key, self._group.digest_to_element(stored.payload)
                )
                entries.append(
                    HashResponseEntry(entry.buddy_id, True, sealed, reported)
                )
        return HashResponse(tuple(entries))

    def handle_frame(self, frame):
        """Dispatch one inbound frame; protocol errors become error frames."""
        try:
            if isinstance(frame, LocationUpdate):
                return self.handle_update(frame)
            if isinstance(frame, SeekRequest):
                return self.answer_seek(frame)
            if isinstance(frame, HashRequest):
                return self.answer_hash(frame)
            return ErrorFrame(ERR_BAD_REQUEST, f"unexpected frame {type(frame).__name__}")
        except UnknownUserError as exc:
            return ErrorFrame(ERR_UNKNOWN_USER, str(exc))
        except StaleUpdateError as exc:
            return ErrorFrame(ERR_STALE_UPDATE, str(exc))
        except ProtocolError as exc:
            return ErrorFrame(ERR_BAD_REQUEST, str(exc))
