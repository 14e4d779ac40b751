"""The reference application: a miniature blockchain ordering node.

Implements the library's application contract as block assembly over a
hash-chained store with a Q-of-N validation policy, plus BFT-safe catch-up
that pulls blocks from peers, validates each one against the consenter set
active at that height, and rotates away from peers serving garbage.
"""

from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Callable, Iterable, Protocol

from . import keys
from .blocks import (
    Block,
    BlockHeader,
    ConsortiumConfig,
    Transaction,
    TxKind,
    data_hash,
    genesis_block,
    validate_block,
)
from .codec import DecodeError
from .contract import Application, VerifyError
from .types import (
    Decision,
    Proposal,
    ProposalMeta,
    Reconfig,
    Signature,
    decode_request_list,
    encode_request_list,
    request_digest,
)

logger = logging.getLogger(__name__)


class BlockStore:
    """Append-only file of length-prefixed canonical block encodings.

    A side index of offsets is rebuilt by a tail scan on open; a torn tail
    from a crash is truncated. ``path=None`` keeps everything in memory.
    """

    def __init__(self, path: str | os.PathLike | None = None, *, fsync: bool = False) -> None:
        self.path = Path(path) if path is not None else None
        self.fsync = fsync
        self._blocks: list[Block] = []
        self._tx_digests: set[bytes] = set()
        self._observers: list[Callable[[Block], None]] = []
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self) -> None:
        raw = self.path.read_bytes()
        pos = 0
        good_end = 0
        while pos + 4 <= len(raw):
            length = int.from_bytes(raw[pos:pos + 4], "big")
            end = pos + 4 + length
            if end > len(raw):
                break
            try:
                block = Block.decode(raw[pos + 4:end])
            except DecodeError:
                break
            self._index(block)
            pos = end
            good_end = end
        if good_end < len(raw):
            logger.warning("truncating torn tail of %s at %d", self.path, good_end)
            with open(self.path, "r+b") as fh:
                fh.truncate(good_end)

    def _index(self, block: Block) -> None:
        self._blocks.append(block)
        for tx in block.payload:
            self._tx_digests.add(request_digest(tx))

    @property
    def height(self) -> int:
        """Number of stored blocks; the next block number."""
        return len(self._blocks)

    def tip(self) -> Block | None:
        return self._blocks[-1] if self._blocks else None

    def get(self, number: int) -> Block:
        return self._blocks[number]

    def has_tx(self, tx_digest: bytes) -> bool:
        return tx_digest in self._tx_digests

    def append(self, block: Block) -> None:
        if block.header.number != self.height:
            raise ValueError(f"expected block {self.height}, got {block.header.number}")
        if self.path is not None:
            encoded = block.encode()
            with open(self.path, "ab") as fh:
                fh.write(len(encoded).to_bytes(4, "big") + encoded)
                fh.flush()
                if self.fsync:
                    os.fsync(fh.fileno())
        self._index(block)
        for observer in list(self._observers):
            observer(block)

    def watch(self, observer: Callable[[Block], None]) -> None:
        """Register a frontier observer (delivery streams)."""
        self._observers.append(observer)

    def read_range(self, start: int, end: int | None = None) -> Iterable[Block]:
        end = self.height if end is None else min(end, self.height)
        for number in range(start, end):
            yield self._blocks[number]


class PeerSource(Protocol):
    """What catch-up needs from a remote ordering node."""

    node_id: int

    def height(self) -> int: ...

    def read_block(self, number: int) -> Block | None: ...


class OrderingApp(Application):
    """One ordering node's application state: its signing key, its block
    store and the active consortium configuration."""

    def __init__(
        self,
        node_id: int,
        keypair: keys.KeyPair,
        consortium: ConsortiumConfig,
        store: BlockStore,
        peers: Callable[[], list[PeerSource]] | None = None,
    ) -> None:
        self.node_id = node_id
        self.keypair = keypair
        self.store = store
        self.peers = peers or (lambda: [])
        if store.height == 0:
            store.append(genesis_block(consortium))
        self.consortium = self._replay_config(consortium)
        self._verified_tx: set[bytes] = set()

    def _replay_config(self, genesis: ConsortiumConfig) -> ConsortiumConfig:
        """The active configuration is whatever the chain says it is."""
        active = genesis
        for block in self.store.read_range(0):
            cfg = self._config_in(block)
            if cfg is not None:
                active = cfg
        return active

    @staticmethod
    def _config_in(block: Block) -> ConsortiumConfig | None:
        for tx in block.transactions():
            if tx.kind is TxKind.CONFIG:
                return ConsortiumConfig.decode(tx.body)
        return None

    # -- request admission ------------------------------------------------

    def verify_request(self, payload: bytes) -> None:
        try:
            tx = Transaction.decode(payload)
        except DecodeError as exc:
            raise VerifyError("malformed-transaction", str(exc)) from None
        digest = request_digest(payload)
        if self.store.has_tx(digest):
            raise VerifyError("duplicate-transaction")
        if not self.consortium.is_client(tx.submitter):
            raise VerifyError("unknown-submitter")
        if digest not in self._verified_tx:
            if not keys.verify(tx.submitter, tx.signature, tx.signed_bytes()):
                raise VerifyError("bad-submitter-signature")
            if tx.kind is TxKind.CONFIG:
                try:
                    ConsortiumConfig.decode(tx.body)
                except Exception as exc:
                    raise VerifyError("malformed-config", str(exc)) from None
            self._verified_tx.add(digest)

    filter = verify_request  # the paper's component name for the same check

    # -- assembly -----------------------------------------------------------

    def assemble(self, metadata: bytes, requests: list[bytes]) -> Proposal:
        """Pack the batch into a block; a config transaction is packed alone
        and everything else stays queued for a later batch."""
        chosen = requests
        for payload in requests:
            if Transaction.decode(payload).kind is TxKind.CONFIG:
                chosen = [payload]
                break
        meta = ProposalMeta.decode(metadata)
        tip = self.store.tip()
        header = BlockHeader(
            number=tip.header.number + 1,
            previous_hash=tip.header.hash(),
            data_hash=data_hash(chosen),
        )
        return Proposal.make(header.encode(), encode_request_list(chosen), metadata)

    def verify_proposal(self, proposal: Proposal) -> None:
        if not proposal.check_digest():
            raise VerifyError("digest-mismatch")
        try:
            header = BlockHeader.decode(proposal.header)
            payload = decode_request_list(proposal.payload)
            meta = proposal.meta()
        except DecodeError as exc:
            raise VerifyError("malformed-structure", str(exc)) from None
        tip = self.store.tip()
        if header.number != tip.header.number + 1:
            raise VerifyError("wrong-number", f"got {header.number}, want {tip.header.number + 1}")
        if header.previous_hash != tip.header.hash():
            raise VerifyError("bad-previous-hash")
        if header.data_hash != data_hash(payload):
            raise VerifyError("bad-data-hash")
        if not payload:
            raise VerifyError("empty-block")
        if meta.sequence != header.number:
            raise VerifyError("sequence-number-mismatch")
        kinds = [Transaction.decode(t).kind for t in payload]
        if any(k is TxKind.CONFIG for k in kinds) and len(payload) != 1:
            raise VerifyError("config-not-alone")
        for tx_payload in payload:
            self.verify_request(tx_payload)

    # -- crypto -------------------------------------------------------------

    def sign_proposal(self, proposal: Proposal) -> Signature:
        return self.sign_state(proposal.digest)

    def sign_state(self, message: bytes) -> Signature:
        return Signature(self.node_id, self.keypair.sign(message), message)

    def verify_signature(self, signature: Signature) -> None:
        if signature.message is None:
            raise VerifyError("missing-attested-content")
        configuration = self.consortium.configuration
        if not configuration.is_member(signature.signer):
            raise VerifyError("unknown-signer", str(signature.signer))
        if not keys.verify(configuration.key_of(signature.signer),
                           signature.value, signature.message):
            raise VerifyError("bad-signature")

    # -- delivery ------------------------------------------------------------

    def deliver(self, decision: Decision) -> Reconfig:
        block = Block.from_decision(decision)
        return self.commit_block(block)

    def commit_block(self, block: Block) -> Reconfig:
        height = self.store.height
        if block.header.number < height:
            # redelivery after restart: idempotent, but report the same effect
            stored = self.store.get(block.header.number)
            if stored.header.hash() != block.header.hash():
                raise VerifyError("conflicting-redelivery", f"block {block.header.number}")
            return self._reconfig_effect(stored)
        if block.header.number != height:
            raise VerifyError("gap", f"got {block.header.number}, have {height}")
        self.store.append(block)
        return self._reconfig_effect(block)

    def _reconfig_effect(self, block: Block) -> Reconfig:
        cfg = self._config_in(block)
        if cfg is None:
            return Reconfig.unchanged()
        self.consortium = cfg
        return Reconfig(changed=True, new_config=cfg.configuration)

    # -- block delivery service ------------------------------------------------

    def serve_blocks(self, start: int, mode: str = "full"):
        """Replay stored blocks from ``start`` and then follow the frontier.

        Returns (backlog, subscribe): the backlog is what is stored now, and
        ``subscribe(cb)`` watches future commits. ``header_meta`` mode strips
        payloads but keeps enough to verify the quorum signatures.
        """
        if mode not in ("full", "header_meta"):
            raise ValueError(f"unknown delivery mode {mode!r}")

        def shape(block: Block):
            if mode == "full":
                return block
            return (block.header, (block.view, block.sequence, block.signatures))

        backlog = [shape(b) for b in self.store.read_range(start)]

        def subscribe(callback) -> None:
            self.store.watch(lambda b: callback(shape(b)))

        return backlog, subscribe

    # -- catch-up ------------------------------------------------------------------

    def sync(self) -> tuple[Decision | None, Reconfig]:
        return self.sync_from_peers()

    def sync_from_peers(self) -> tuple[Decision | None, Reconfig]:
        """Pull missing blocks from any peer, validating each against the
        evolving consenter set; a peer serving an invalid block is abandoned
        for the next one."""
        changed = False
        ordered = sorted(self.peers(), key=lambda p: (p.node_id <= self.node_id, p.node_id))
        banned: set[int] = set()
        progress = True
        while progress:
            progress = False
            targets = [p for p in ordered if p.node_id not in banned]
            if not targets:
                break
            frontier = max((p.height() for p in targets), default=self.store.height)
            if frontier <= self.store.height:
                break
            for peer in targets:
                number = self.store.height
                if number >= frontier:
                    break
                block = peer.read_block(number)
                if block is None:
                    continue
                try:
                    validate_block(block, self.consortium, previous=self.store.tip().header)
                    self.commit_block(block)
                except VerifyError as exc:
                    logger.warning("node %d: peer %d served bad block %d (%s)",
                                   self.node_id, peer.node_id, number, exc)
                    banned.add(peer.node_id)
                    continue
                changed = changed or self._config_in(block) is not None
                progress = True
        tip = self.store.tip()
        latest = tip.to_decision() if tip is not None and tip.header.number > 0 else None
        if changed:
            return latest, Reconfig(changed=True, new_config=self.consortium.configuration)
        return latest, Reconfig.unchanged()
