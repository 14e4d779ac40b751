"""Deterministic discrete-event network simulator.

One heap of timestamped events drives every node's message deliveries and
timers. Identical (scenario, seed) inputs replay to byte-identical traces:
all randomness flows from one seeded RNG, ties break on (deadline, actor,
creation counter), and nodes are plain callbacks with no threads.

Each node also has a modeled processing cost (per message, per transaction,
per signature). A node is sequential: events that arrive while it is busy
start only when the previous one finishes, which is what makes batch-size
versus latency trends emerge instead of being scripted.
"""

from __future__ import annotations

import heapq
import logging
import random
from dataclasses import dataclass, field
from typing import Callable

from .messages import Commit, ConsensusMessage, ForwardedRequest, NewView, Prepare, PrePrepare, message_kind
from .transport import MessageHandler, TimerHandle
from .types import NodeID, decode_request_list

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LatencyModel:
    """One-way delays in seconds for every ordered pair, plus jitter as a
    +/- fraction sampled uniformly per message."""

    matrix: tuple[tuple[float, ...], ...]
    jitter: float = 0.0

    def sample(self, rng: random.Random, src: int, dst: int) -> float:
        base = self.matrix[src][dst]
        if self.jitter:
            base *= 1.0 + rng.uniform(-self.jitter, self.jitter)
        return max(base, 0.0)

    @classmethod
    def uniform(cls, n: int, delay: float, jitter: float = 0.0) -> "LatencyModel":
        row = tuple(delay for _ in range(n))
        return cls(matrix=tuple(row for _ in range(n)), jitter=jitter)


@dataclass(frozen=True)
class Partition:
    """Messages between the groups are dropped while the window is active."""

    groups: tuple[frozenset, ...]
    start: float
    end: float

    def blocks(self, now: float, src: int, dst: int) -> bool:
        if not (self.start <= now < self.end):
            return False
        sg = next((i for i, g in enumerate(self.groups) if src in g), None)
        dg = next((i for i, g in enumerate(self.groups) if dst in g), None)
        return sg is not None and dg is not None and sg != dg


# A policy sees every (now, src, dst, message) its node sends and returns the
# list of messages actually put on the wire to dst (possibly mutated, empty
# to suppress). It can only touch its own node's traffic: sender identity is
# attached by the network on delivery.
MessagePolicy = Callable[[float, int, int, ConsensusMessage], list[ConsensusMessage]]


@dataclass
class ProcessingCosts:
    """Simulated CPU seconds charged to a node for handling one message."""

    per_message: float = 0.0
    per_tx: float = 0.0
    per_signature: float = 0.0

    def cost(self, message: ConsensusMessage) -> float:
        extra = 0.0
        if isinstance(message, PrePrepare):
            try:
                extra = self.per_tx * len(decode_request_list(message.proposal.payload))
            except Exception:
                extra = 0.0
        elif isinstance(message, (Prepare, Commit)):
            extra = self.per_signature
        elif isinstance(message, ForwardedRequest):
            extra = self.per_tx
        elif isinstance(message, NewView):
            extra = self.per_signature * sum(1 + len(vd.certificate.prepares if vd.certificate else ()) for vd in message.view_data)
        return self.per_message + extra


class SimPort:
    """A node's handle onto the simulated network: Transport + Scheduler."""

    def __init__(self, net: "SimNetwork", node_id: NodeID) -> None:
        self._net = net
        self.node_id = node_id

    def send(self, to: NodeID, message: ConsensusMessage) -> None:
        self._net._send(self.node_id, to, message)

    def broadcast(self, message: ConsensusMessage) -> None:
        for peer in self._net.node_ids():
            if peer != self.node_id:
                self._net._send(self.node_id, peer, message)

    def now(self) -> float:
        return self._net.local_now(self.node_id)

    def call_later(self, delay: float, fn: Callable[[], None]) -> TimerHandle:
        return self._net._schedule_timer(self.node_id, delay, fn)


@dataclass
class _NodeSlot:
    handler: MessageHandler | None = None
    crashed: bool = False
    busy_until: float = 0.0
    local_now: float = 0.0
    policy: MessagePolicy | None = None


class SimNetwork:
    def __init__(
        self,
        seed: int = 0,
        latency: LatencyModel | None = None,
        costs: ProcessingCosts | None = None,
        fifo: bool = False,
    ) -> None:
        self.rng = random.Random(seed)
        self.latency = latency
        self.costs = costs or ProcessingCosts()
        self.fifo = fifo
        self.clock = 0.0
        self._heap: list = []
        self._counter = 0
        self._nodes: dict[NodeID, _NodeSlot] = {}
        self._partitions: list[Partition] = []
        self._drop_rules: list[Callable[[float, int, int, ConsensusMessage], bool]] = []
        self._last_sent: dict[tuple[int, int], float] = {}
        self.sent_counts: dict[str, int] = {}
        self.delivered_counts: dict[str, int] = {}
        self.trace: list[tuple] = []

    # -- topology ---------------------------------------------------------

    def add_node(self, node_id: NodeID) -> SimPort:
        self._nodes[node_id] = _NodeSlot()
        return SimPort(self, node_id)

    def attach_handler(self, node_id: NodeID, handler: MessageHandler) -> None:
        self._nodes[node_id].handler = handler

    def node_ids(self) -> list[NodeID]:
        return sorted(self._nodes)

    def set_policy(self, node_id: NodeID, policy: MessagePolicy | None) -> None:
        self._nodes[node_id].policy = policy

    def add_partition(self, partition: Partition) -> None:
        self._partitions.append(partition)

    def add_drop_rule(self, rule) -> None:
        self._drop_rules.append(rule)

    def crash(self, node_id: NodeID) -> None:
        self._nodes[node_id].crashed = True

    def revive(self, node_id: NodeID) -> None:
        slot = self._nodes[node_id]
        slot.crashed = False
        slot.busy_until = self.clock

    def is_crashed(self, node_id: NodeID) -> bool:
        return self._nodes[node_id].crashed

    def local_now(self, node_id: NodeID) -> float:
        return max(self.clock, self._nodes[node_id].local_now)

    # -- event plumbing ----------------------------------------------------

    def _push(self, when: float, actor: int, kind: str, data) -> None:
        self._counter += 1
        heapq.heappush(self._heap, (when, actor, self._counter, kind, data))

    def _send(self, src: NodeID, dst: NodeID, message: ConsensusMessage) -> None:
        slot = self._nodes[src]
        if slot.crashed:
            return
        now = self.local_now(src)
        outgoing = [message]
        if slot.policy is not None:
            outgoing = slot.policy(now, src, dst, message)
        for msg in outgoing:
            self.sent_counts[message_kind(msg)] = self.sent_counts.get(message_kind(msg), 0) + 1
            if any(p.blocks(now, src, dst) for p in self._partitions):
                continue
            if any(rule(now, src, dst, msg) for rule in self._drop_rules):
                continue
            delay = self.latency.sample(self.rng, src, dst) if self.latency else 0.0
            when = now + delay
            if self.fifo:
                floor = self._last_sent.get((src, dst), 0.0)
                when = max(when, floor)
                self._last_sent[(src, dst)] = when
            self._push(when, src, "msg", (src, dst, msg))

    def _schedule_timer(self, node_id: NodeID, delay: float, fn) -> TimerHandle:
        self._counter += 1
        handle = TimerHandle(self.local_now(node_id) + delay, fn, self._counter)
        heapq.heappush(self._heap, (handle.when, node_id, handle.order, "timer", handle))
        return handle

    def call_at(self, when: float, fn: Callable[[], None]) -> TimerHandle:
        """Schedule an external event (client or harness action) not tied to
        any node; it fires even while nodes are crashed."""
        self._counter += 1
        handle = TimerHandle(max(when, self.clock), fn, self._counter)
        heapq.heappush(self._heap, (handle.when, -1, handle.order, "external", handle))
        return handle

    # -- the clock ---------------------------------------------------------

    def advance(self, until: float) -> int:
        """Run every event due up to ``until`` (simulated seconds); returns
        the number of events processed."""
        processed = 0
        while self._heap and self._heap[0][0] <= until:
            when, actor, _order, kind, data = heapq.heappop(self._heap)
            self.clock = max(self.clock, when)
            processed += 1
            if kind == "external":
                handle = data
                if not handle.cancelled:
                    handle.fn()
            elif kind == "timer":
                handle = data
                if handle.cancelled:
                    continue
                slot = self._nodes.get(actor)
                if slot is None or slot.crashed or slot.handler is None:
                    continue
                self._run_on_node(actor, when, handle.fn, cost=0.0)
            else:
                src, dst, msg = data
                slot = self._nodes.get(dst)
                if slot is None or slot.crashed or slot.handler is None:
                    continue
                k = message_kind(msg)
                self.delivered_counts[k] = self.delivered_counts.get(k, 0) + 1
                self.trace.append((round(when, 9), src, dst, k))
                cost = self.costs.cost(msg)
                self._run_on_node(dst, when, lambda s=src, m=msg, h=slot.handler: h(s, m), cost)
        self.clock = max(self.clock, until)
        return processed

    def _run_on_node(self, node_id: NodeID, when: float, fn, cost: float) -> None:
        slot = self._nodes[node_id]
        start = max(when, slot.busy_until)
        slot.local_now = start
        slot.busy_until = start + cost
        try:
            fn()
        finally:
            slot.local_now = slot.busy_until

    def run(self, duration: float, *, step: float = 0.25, stop: Callable[[], bool] | None = None) -> float:
        """Advance in slices until ``stop()`` or the duration cap; returns
        the simulated time reached."""
        t = self.clock
        end = t + duration
        while t < end:
            t = min(t + step, end)
            self.advance(t)
            if stop is not None and stop():
                break
        return self.clock

    def pending_events(self) -> int:
        return len(self._heap)
