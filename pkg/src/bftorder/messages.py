"""Consensus protocol messages and their canonical wire encoding.

The sender identity is not part of a message: transports authenticate the
sending channel and hand ``(sender, message)`` to the engine, so a Byzantine
node can never forge another node's identity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

from .codec import DecodeError, Reader, Writer
from .types import (
    Proposal,
    ProposalMeta,
    SequenceNumber,
    Signature,
    ViewNumber,
    proposal_digest_parts,
)


@dataclass(frozen=True)
class PreparedCertificate:
    """Proof that a proposal could have been committed at a sequence: a
    quorum of signed prepare attestations for one digest."""

    view: ViewNumber
    sequence: SequenceNumber
    digest: bytes
    prepares: tuple[Signature, ...]

    def write_to(self, w: Writer) -> None:
        w.u64(self.view).u64(self.sequence).bytes_(self.digest)
        w.list_(self.prepares, lambda wr, s: s.write_to(wr))

    @classmethod
    def read_from(cls, r: Reader) -> "PreparedCertificate":
        return cls(
            view=r.u64(),
            sequence=r.u64(),
            digest=r.bytes_(),
            prepares=tuple(r.list_(Signature.read_from)),
        )


def prepare_attestation(view: ViewNumber, sequence: SequenceNumber, digest: bytes) -> bytes:
    """Bytes a node signs when sending a Prepare; binds view, sequence and
    digest so the signature is usable inside a prepared certificate."""
    return Writer().raw(b"prep").u64(view).u64(sequence).bytes_(digest).done()


@dataclass(frozen=True)
class PrePrepare:
    proposal: Proposal


@dataclass(frozen=True)
class Prepare:
    view: ViewNumber
    sequence: SequenceNumber
    digest: bytes
    signature: Signature


@dataclass(frozen=True)
class Commit:
    view: ViewNumber
    sequence: SequenceNumber
    digest: bytes
    signature: Signature


@dataclass(frozen=True)
class ViewChange:
    target_view: ViewNumber


@dataclass(frozen=True)
class DeliveryProof:
    """Unforgeable evidence that a sequence was decided: the delivered
    proposal's header, payload hash and metadata (enough to recompute the
    signed digest and read the sequence) plus the commit quorum over it."""

    header: bytes
    payload_hash: bytes
    metadata: bytes
    signatures: tuple[Signature, ...]

    def digest(self) -> bytes:
        return proposal_digest_parts(self.header, self.payload_hash, self.metadata)

    def sequence(self) -> SequenceNumber:
        return ProposalMeta.decode(self.metadata).sequence

    def write_to(self, w: Writer) -> None:
        w.bytes_(self.header).bytes_(self.payload_hash).bytes_(self.metadata)
        w.list_(self.signatures, lambda wr, s: s.write_to(wr))

    @classmethod
    def read_from(cls, r: Reader) -> "DeliveryProof":
        return cls(
            header=r.bytes_(),
            payload_hash=r.bytes_(),
            metadata=r.bytes_(),
            signatures=tuple(r.list_(Signature.read_from)),
        )


@dataclass(frozen=True)
class ViewData:
    """A node's signed state summary sent to the incoming leader.

    Carries the last delivered sequence with its delivery proof, the
    prepared certificate for the next sequence if one exists, and (when
    certified) the full proposal so the new leader can re-propose it.
    """

    target_view: ViewNumber
    last_delivered: SequenceNumber
    proof: DeliveryProof | None
    certificate: PreparedCertificate | None
    certified_proposal: Proposal | None
    signature: Signature | None = None

    def summary_bytes(self) -> bytes:
        """The attested portion (everything except the signature)."""
        w = Writer().raw(b"vdat")
        w.u64(self.target_view).u64(self.last_delivered)
        w.optional(self.proof, lambda wr, p: p.write_to(wr))
        w.optional(self.certificate, lambda wr, c: c.write_to(wr))
        w.optional(self.certified_proposal, lambda wr, p: wr.bytes_(p.encode()))
        return w.done()

    def signed(self, signature: Signature) -> "ViewData":
        return ViewData(
            self.target_view,
            self.last_delivered,
            self.proof,
            self.certificate,
            self.certified_proposal,
            signature,
        )


@dataclass(frozen=True)
class NewView:
    """The incoming leader's justification: the quorum of signed ViewData it
    selected from, plus the certified proposal it re-proposes, if any."""

    target_view: ViewNumber
    view_data: tuple[ViewData, ...]
    reproposal: Proposal | None


@dataclass(frozen=True)
class Heartbeat:
    view: ViewNumber
    next_sequence: SequenceNumber


@dataclass(frozen=True)
class ForwardedRequest:
    payload: bytes


ConsensusMessage = Union[
    PrePrepare, Prepare, Commit, ViewChange, ViewData, NewView, Heartbeat, ForwardedRequest
]

_TAG_PREPREPARE = 1
_TAG_PREPARE = 2
_TAG_COMMIT = 3
_TAG_VIEWCHANGE = 4
_TAG_VIEWDATA = 5
_TAG_NEWVIEW = 6
_TAG_HEARTBEAT = 7
_TAG_FORWARDED = 8

MESSAGE_KINDS = {
    PrePrepare: "preprepare",
    Prepare: "prepare",
    Commit: "commit",
    ViewChange: "viewchange",
    ViewData: "viewdata",
    NewView: "newview",
    Heartbeat: "heartbeat",
    ForwardedRequest: "forwarded",
}


def message_kind(message: ConsensusMessage) -> str:
    return MESSAGE_KINDS[type(message)]


def _write_viewdata(w: Writer, vd: ViewData) -> None:
    w.raw(vd.summary_bytes())
    w.optional(vd.signature, lambda wr, s: s.write_to(wr))


def _read_viewdata(r: Reader) -> ViewData:
    tag = r.raw(4)
    if tag != b"vdat":
        raise DecodeError("bad view-data tag")
    vd = ViewData(
        target_view=r.u64(),
        last_delivered=r.u64(),
        last_digest=r.bytes_(),
        certificate=r.optional(PreparedCertificate.read_from),
        certified_proposal=r.optional(lambda rd: Proposal.decode(rd.bytes_())),
    )
    return vd.signed(r.optional(Signature.read_from))


def encode_message(message: ConsensusMessage) -> bytes:
    w = Writer()
    if isinstance(message, PrePrepare):
        w.u8(_TAG_PREPREPARE).bytes_(message.proposal.encode())
    elif isinstance(message, Prepare):
        w.u8(_TAG_PREPARE).u64(message.view).u64(message.sequence).bytes_(message.digest)
        message.signature.write_to(w)
    elif isinstance(message, Commit):
        w.u8(_TAG_COMMIT).u64(message.view).u64(message.sequence).bytes_(message.digest)
        message.signature.write_to(w)
    elif isinstance(message, ViewChange):
        w.u8(_TAG_VIEWCHANGE).u64(message.target_view)
    elif isinstance(message, ViewData):
        w.u8(_TAG_VIEWDATA)
        _write_viewdata(w, message)
    elif isinstance(message, NewView):
        w.u8(_TAG_NEWVIEW).u64(message.target_view)
        w.list_(message.view_data, _write_viewdata)
        w.optional(message.reproposal, lambda wr, p: wr.bytes_(p.encode()))
    elif isinstance(message, Heartbeat):
        w.u8(_TAG_HEARTBEAT).u64(message.view).u64(message.next_sequence)
    elif isinstance(message, ForwardedRequest):
        w.u8(_TAG_FORWARDED).bytes_(message.payload)
    else:
        raise TypeError(f"not a consensus message: {message!r}")
    return w.done()


def decode_message(buf: bytes) -> ConsensusMessage:
    r = Reader(buf)
    tag = r.u8()
    msg: ConsensusMessage
    if tag == _TAG_PREPREPARE:
        msg = PrePrepare(Proposal.decode(r.bytes_()))
    elif tag == _TAG_PREPARE:
        msg = Prepare(r.u64(), r.u64(), r.bytes_(), Signature.read_from(r))
    elif tag == _TAG_COMMIT:
        msg = Commit(r.u64(), r.u64(), r.bytes_(), Signature.read_from(r))
    elif tag == _TAG_VIEWCHANGE:
        msg = ViewChange(r.u64())
    elif tag == _TAG_VIEWDATA:
        msg = _read_viewdata(r)
    elif tag == _TAG_NEWVIEW:
        target = r.u64()
        vds = tuple(r.list_(_read_viewdata))
        repro = r.optional(lambda rd: Proposal.decode(rd.bytes_()))
        msg = NewView(target, vds, repro)
    elif tag == _TAG_HEARTBEAT:
        msg = Heartbeat(r.u64(), r.u64())
    elif tag == _TAG_FORWARDED:
        msg = ForwardedRequest(r.bytes_())
    else:
        raise DecodeError(f"unknown message tag {tag}")
    r.expect_end()
    return msg
