"""Peer-side censorship-resistant block consumption.

A consuming peer takes full blocks from one provider and header/metadata
items from every other node. Header items are enough to verify the quorum
signatures, so the monitor can tell when the full-block provider is
withholding: if f or more header streams stay ahead of the full stream for
a threshold period, the provider is replaced by a random ahead node and
quarantined for one window so the peer does not bounce straight back.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from typing import Callable

from . import keys
from .blocks import Block, BlockHeader, ConsortiumConfig, Transaction, TxKind, validate_block
from .contract import VerifyError
from .types import NodeID, ProposalMeta, Signature, proposal_digest_parts

logger = logging.getLogger(__name__)


@dataclass
class MonitorState:
    full_provider: NodeID
    header_frontiers: dict[NodeID, int] = field(default_factory=dict)
    full_frontier: int = 0
    lag_started: float | None = None
    quarantined: dict[NodeID, float] = field(default_factory=dict)


@dataclass(frozen=True)
class Keep:
    pass


@dataclass(frozen=True)
class Switch:
    new_provider: NodeID


class DeliveryMonitor:
    def __init__(
        self,
        consortium: ConsortiumConfig,
        providers: list[NodeID],
        full_provider: NodeID,
        threshold: float,
        rng: random.Random | None = None,
        on_block: Callable[[Block], None] | None = None,
        start_frontier: int = 0,
    ) -> None:
        self.consortium = consortium
        self.providers = list(providers)
        self.threshold = threshold
        self.rng = rng or random.Random(0)
        self.on_block = on_block
        self.state = MonitorState(full_provider=full_provider, full_frontier=start_frontier)
        self.blocks: dict[int, Block] = {}

    def _verify_item(self, header: BlockHeader, view: int, sequence: int,
                     signatures: tuple[Signature, ...]) -> bool:
        """A header item binds its signatures without the payload: the header
        commits to the payload hash, which is all the proposal digest needs."""
        digest = proposal_digest_parts(
            header.encode(), header.data_hash, ProposalMeta(view, sequence).encode())
        configuration = self.consortium.configuration
        valid = set()
        for sig in signatures:
            if sig.message != digest or not configuration.is_member(sig.signer):
                continue
            if keys.verify(configuration.key_of(sig.signer), sig.value, sig.message):
                valid.add(sig.signer)
        return len(valid) >= configuration.q

    def on_header_item(self, from_node: NodeID, header: BlockHeader,
                       metadata: tuple[int, int, tuple[Signature, ...]]) -> None:
        view, sequence, signatures = metadata
        if header.number <= self.state.header_frontiers.get(from_node, 0):
            return
        if not self._verify_item(header, view, sequence, signatures):
            logger.debug("header item %d from %d failed verification", header.number, from_node)
            return
        self.state.header_frontiers[from_node] = header.number

    def on_full_block(self, from_node: NodeID, block: Block) -> None:
        if from_node != self.state.full_provider:
            return
        if block.header.number != self.state.full_frontier + 1:
            return
        previous = self.blocks.get(block.header.number - 1)
        try:
            validate_block(block, self.consortium,
                           previous=previous.header if previous else None)
        except VerifyError:
            logger.warning("full block %d from %d failed validation",
                           block.header.number, from_node)
            return
        self.blocks[block.header.number] = block
        self.state.full_frontier = block.header.number
        cfg = self._config_in(block)
        if cfg is not None:
            self.consortium = cfg
        if self.on_block is not None:
            self.on_block(block)

    @staticmethod
    def _config_in(block: Block) -> ConsortiumConfig | None:
        for tx in block.payload:
            decoded = Transaction.decode(tx)
            if decoded.kind is TxKind.CONFIG:
                return ConsortiumConfig.decode(decoded.body)
        return None

    def ahead_nodes(self) -> list[NodeID]:
        return sorted(
            node for node, frontier in self.state.header_frontiers.items()
            if frontier > self.state.full_frontier and node != self.state.full_provider
        )

    def evaluate_censorship(self, now: float) -> Keep | Switch:
        """Switch iff at least f header streams have been ahead of the full
        stream continuously for the threshold period."""
        f = self.consortium.configuration.f
        ahead = self.ahead_nodes()
        if len(ahead) < f:
            self.state.lag_started = None
            return Keep()
        if self.state.lag_started is None:
            self.state.lag_started = now
            return Keep()
        if now - self.state.lag_started < self.threshold:
            return Keep()
        candidates = [n for n in ahead
                      if self.state.quarantined.get(n, -1e18) + self.threshold <= now]
        if not candidates:
            candidates = ahead
        new_provider = candidates[self.rng.randrange(len(candidates))]
        self.state.quarantined[self.state.full_provider] = now
        old = self.state.full_provider
        self.state.full_provider = new_provider
        self.state.lag_started = None
        logger.info("suspected censorship by %d, switching full stream to %d", old, new_provider)
        return Switch(new_provider)


def submit_to_all(nodes, payload: bytes) -> int:
    """Client helper: hand the transaction to every consenter, tolerating
    unreachable ones. Returns how many accepted it."""
    delivered = 0
    for node in nodes:
        try:
            node.submit_request(payload)
            delivered += 1
        except Exception:
            continue
    return delivered
