"""Request pool: queues validated requests, owns the two censorship-defense
deadlines per request, cuts leader batches, and dedupes replays."""

from __future__ import annotations

import enum
from collections import OrderedDict, deque
from dataclasses import dataclass, field

from .types import Request, request_digest


class EnqueueResult(enum.Enum):
    OK = "ok"
    DUPLICATE = "duplicate"
    FULL = "full"


@dataclass
class PooledRequest:
    request: Request
    arrival: float
    forward_deadline: float
    complaint_deadline: float
    forwarded: bool = False
    in_flight: bool = False


@dataclass
class RequestPool:
    """FIFO pool bounded to ``capacity_factor * batch_max_count`` entries.

    The pool does not run timers itself; the engine schedules callbacks and
    consults the stored deadlines, so a reset deadline simply makes a stale
    callback a no-op.
    """

    batch_max_count: int
    batch_timeout: float
    forward_timeout: float
    complaint_timeout: float
    capacity_factor: int = 4
    dedupe_blocks: int = 10

    _entries: OrderedDict = field(default_factory=OrderedDict, repr=False)
    _recent_delivered: deque = field(default_factory=deque, repr=False)
    _recent_set: set = field(default_factory=set, repr=False)

    @property
    def capacity(self) -> int:
        return self.capacity_factor * self.batch_max_count

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, digest: bytes) -> PooledRequest | None:
        return self._entries.get(digest)

    def enqueue(self, payload: bytes, now: float) -> EnqueueResult:
        digest = request_digest(payload)
        if digest in self._entries or digest in self._recent_set:
            return EnqueueResult.DUPLICATE
        if len(self._entries) >= self.capacity:
            return EnqueueResult.FULL
        self._entries[digest] = PooledRequest(
            request=Request(payload, digest),
            arrival=now,
            forward_deadline=now + self.forward_timeout,
            complaint_deadline=now + self.complaint_timeout,
        )
        return EnqueueResult.OK

    def cut_batch(self, now: float, *, force: bool = False) -> list[bytes]:
        """Return up to batch_max_count payloads in arrival order, marking
        them in flight, if the size or age trigger has fired (or forced)."""
        available = [e for e in self._entries.values() if not e.in_flight]
        if not available:
            return []
        full = len(available) >= self.batch_max_count
        aged = now - available[0].arrival >= self.batch_timeout
        if not (full or aged or force):
            return []
        batch = available[: self.batch_max_count]
        for entry in batch:
            entry.in_flight = True
        return [e.request.payload for e in batch]

    def next_batch_deadline(self) -> float | None:
        """When the age trigger for the oldest pending request fires."""
        for entry in self._entries.values():
            if not entry.in_flight:
                return entry.arrival + self.batch_timeout
        return None

    def has_pending(self) -> bool:
        return any(not e.in_flight for e in self._entries.values())

    def restore(self, payloads: list[bytes]) -> None:
        """Return previously cut payloads to the queue (leader demoted, or
        the assembler deferred them)."""
        for payload in payloads:
            entry = self._entries.get(request_digest(payload))
            if entry is not None:
                entry.in_flight = False

    def prune_delivered(self, payloads: list[bytes]) -> list[bytes]:
        """Drop every delivered request and remember its digest for replay
        suppression over the last ``dedupe_blocks`` decisions."""
        block_digests = []
        for payload in payloads:
            digest = request_digest(payload)
            block_digests.append(digest)
            self._entries.pop(digest, None)
            self._recent_set.add(digest)
        if block_digests:
            self._recent_delivered.append(block_digests)
            while len(self._recent_delivered) > self.dedupe_blocks:
                for old in self._recent_delivered.popleft():
                    self._recent_set.discard(old)
        return block_digests

    def reverify_all(self, verify) -> list[bytes]:
        """Re-run ``verify(payload)`` on everything pooled; evict entries for
        which it raises. Returns the evicted digests."""
        evicted = []
        for digest, entry in list(self._entries.items()):
            try:
                verify(entry.request.payload)
            except Exception:
                del self._entries[digest]
                evicted.append(digest)
        return evicted

    def on_view_change(self, now: float) -> None:
        """New leader gets a fresh complaint window; forwarding re-arms; any
        in-flight batch returns to the queue."""
        for entry in self._entries.values():
            entry.in_flight = False
            entry.forwarded = False
            entry.forward_deadline = now + self.forward_timeout
            entry.complaint_deadline = now + self.complaint_timeout

    def reset_complaints(self, now: float) -> None:
        for entry in self._entries.values():
            entry.complaint_deadline = now + self.complaint_timeout

    def pending_payloads(self) -> list[bytes]:
        return [e.request.payload for e in self._entries.values()]
