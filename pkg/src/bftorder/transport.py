"""Transport and scheduler contracts the engine is written against.

Point-to-point channels are authenticated: whatever carries a message must
attach the true sender identity on receipt. Two implementations ship with
the library: the deterministic in-process network in :mod:`bftorder.simnet`
(the primary test substrate) and the socket transport in
:mod:`bftorder.socknet` (for the demo CLI).
"""

from __future__ import annotations

from typing import Callable, Protocol, runtime_checkable

from .messages import ConsensusMessage
from .types import NodeID

MessageHandler = Callable[[NodeID, ConsensusMessage], None]


@runtime_checkable
class Transport(Protocol):
    def send(self, to: NodeID, message: ConsensusMessage) -> None:
        """Fire-and-forget; at-most-once delivery, may drop or reorder."""
        ...

    def broadcast(self, message: ConsensusMessage) -> None:
        """Send to every other consenter (never to self)."""
        ...


class TimerHandle:
    __slots__ = ("when", "fn", "cancelled", "order")

    def __init__(self, when: float, fn: Callable[[], None], order: int) -> None:
        self.when = when
        self.fn = fn
        self.cancelled = False
        self.order = order

    def cancel(self) -> None:
        self.cancelled = True


@runtime_checkable
class Scheduler(Protocol):
    def now(self) -> float: ...

    def call_later(self, delay: float, fn: Callable[[], None]) -> TimerHandle: ...
