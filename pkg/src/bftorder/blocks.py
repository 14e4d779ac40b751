"""Block and transaction structures of the reference ordering application.

A block is the application-level realization of a proposal: the three
proposal sections map to the canonical encodings of (header, transaction
list, view/sequence metadata), so blocks and proposals convert losslessly
and the commit signatures over the proposal digest authenticate the block.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass

from . import keys
from .codec import DecodeError, Reader, Writer
from .contract import VerifyError
from .types import (
    Configuration,
    Decision,
    Proposal,
    ProposalMeta,
    Signature,
    decode_request_list,
    encode_request_list,
)


class TxKind(enum.IntEnum):
    ORDINARY = 0
    CONFIG = 1


_TX_ATTEST = b"txv1"


@dataclass(frozen=True)
class Transaction:
    kind: TxKind
    submitter: bytes  # verification key of the submitting client
    body: bytes
    signature: bytes

    def encode(self) -> bytes:
        return (
            Writer()
            .u8(int(self.kind))
            .bytes_(self.submitter)
            .bytes_(self.body)
            .bytes_(self.signature)
            .done()
        )

    @classmethod
    def decode(cls, buf: bytes) -> "Transaction":
        r = Reader(buf)
        try:
            kind = TxKind(r.u8())
        except ValueError as exc:
            raise DecodeError(str(exc)) from None
        tx = cls(kind=kind, submitter=r.bytes_(), body=r.bytes_(), signature=r.bytes_())
        r.expect_end()
        return tx

    def signed_bytes(self) -> bytes:
        return Writer().raw(_TX_ATTEST).u8(int(self.kind)).bytes_(self.body).done()

    @classmethod
    def create(cls, kind: TxKind, body: bytes, keypair: keys.KeyPair) -> "Transaction":
        unsigned = Writer().raw(_TX_ATTEST).u8(int(kind)).bytes_(body).done()
        return cls(kind, keypair.public, body, keypair.sign(unsigned))


@dataclass(frozen=True)
class ConsortiumConfig:
    """Full replacement configuration carried by a config transaction:
    the library Configuration plus the authorized client keys."""

    configuration: Configuration
    clients: tuple[bytes, ...]

    def encode(self) -> bytes:
        w = Writer()
        w.bytes_(self.configuration.encode())
        w.list_(self.clients, lambda wr, c: wr.bytes_(c))
        return w.done()

    @classmethod
    def decode(cls, buf: bytes) -> "ConsortiumConfig":
        r = Reader(buf)
        configuration = Configuration.decode(r.bytes_())
        clients = tuple(r.list_(lambda rd: rd.bytes_()))
        r.expect_end()
        return cls(configuration, clients)

    def is_client(self, key: bytes) -> bool:
        return key in self.clients


@dataclass(frozen=True)
class BlockHeader:
    number: int
    previous_hash: bytes
    data_hash: bytes

    def encode(self) -> bytes:
        return Writer().u64(self.number).bytes_(self.previous_hash).bytes_(self.data_hash).done()

    @classmethod
    def decode(cls, buf: bytes) -> "BlockHeader":
        r = Reader(buf)
        h = cls(number=r.u64(), previous_hash=r.bytes_(), data_hash=r.bytes_())
        r.expect_end()
        return h

    def hash(self) -> bytes:
        return hashlib.sha256(self.encode()).digest()


def data_hash(transactions: tuple[bytes, ...] | list[bytes]) -> bytes:
    return hashlib.sha256(encode_request_list(list(transactions))).digest()


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    payload: tuple[bytes, ...]          # encoded transactions, in order
    view: int
    sequence: int
    signatures: tuple[Signature, ...]   # commit signatures over the proposal digest

    def encode(self) -> bytes:
        w = Writer()
        w.bytes_(self.header.encode())
        w.list_(self.payload, lambda wr, t: wr.bytes_(t))
        w.u64(self.view).u64(self.sequence)
        w.list_(self.signatures, lambda wr, s: s.write_to(wr))
        return w.done()

    @classmethod
    def decode(cls, buf: bytes) -> "Block":
        r = Reader(buf)
        header = BlockHeader.decode(r.bytes_())
        payload = tuple(r.list_(lambda rd: rd.bytes_()))
        view = r.u64()
        sequence = r.u64()
        sigs = tuple(r.list_(Signature.read_from))
        r.expect_end()
        return cls(header, payload, view, sequence, sigs)

    def to_proposal(self) -> Proposal:
        return Proposal.make(
            self.header.encode(),
            encode_request_list(list(self.payload)),
            ProposalMeta(self.view, self.sequence).encode(),
        )

    def proposal_digest(self) -> bytes:
        return self.to_proposal().digest

    def transactions(self) -> list[Transaction]:
        return [Transaction.decode(t) for t in self.payload]

    @classmethod
    def from_decision(cls, decision: Decision) -> "Block":
        header = BlockHeader.decode(decision.proposal.header)
        meta = decision.proposal.meta()
        payload = tuple(decode_request_list(decision.proposal.payload))
        return cls(header, payload, meta.view, meta.sequence, decision.signatures)

    def to_decision(self) -> Decision:
        return Decision(self.to_proposal(), self.signatures)


def genesis_block(consortium: ConsortiumConfig) -> Block:
    """Block 0: carries the initial configuration as an unsigned-policy
    config transaction; installed out-of-band on every node."""
    tx = Transaction(TxKind.CONFIG, b"genesis", consortium.encode(), b"")
    payload = (tx.encode(),)
    header = BlockHeader(0, b"\x00" * 32, data_hash(payload))
    return Block(header, payload, 0, 0, ())


def validate_block(
    block: Block,
    policy: ConsortiumConfig,
    previous: BlockHeader | None = None,
) -> None:
    """Structural, chain and Q-of-N policy validation.

    ``policy`` is the consortium configuration active when the block was
    committed; every block after genesis needs at least q valid signatures
    from distinct members of that consenter set, over the block's proposal
    digest. Raises VerifyError naming the first violated rule.
    """
    if block.header.data_hash != data_hash(block.payload):
        raise VerifyError("bad-data-hash", f"block {block.header.number}")
    if previous is not None:
        if block.header.number != previous.number + 1:
            raise VerifyError(
                "bad-number", f"got {block.header.number}, want {previous.number + 1}")
        if block.header.previous_hash != previous.hash():
            raise VerifyError("bad-previous-hash", f"block {block.header.number}")
    if block.header.number == 0:
        return  # genesis is installed out-of-band, not signed by the policy
    configuration = policy.configuration
    digest = block.proposal_digest()
    valid_signers: set[int] = set()
    for sig in block.signatures:
        if sig.message != digest:
            continue
        if not configuration.is_member(sig.signer):
            continue
        if keys.verify(configuration.key_of(sig.signer), sig.value, sig.message):
            valid_signers.add(sig.signer)
    if len(valid_signers) < configuration.q:
        raise VerifyError(
            "insufficient-signatures",
            f"block {block.header.number}: {len(valid_signers)} valid of q={configuration.q}",
        )
