"""Core domain types and quorum arithmetic shared by every other module.

All types here are immutable values: safe to copy, hash and ship between
execution contexts. Each one round-trips through the canonical encoding in
:mod:`bftorder.codec`.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from .codec import DecodeError, Reader, Writer

DIGEST_SIZE = 32

NodeID = int
ViewNumber = int
SequenceNumber = int


class ConfigurationError(ValueError):
    """Cluster parameters cannot support Byzantine fault tolerance."""


def compute_quorum(n: int) -> tuple[int, int]:
    """Return (f, q) for a cluster of n consenters.

    f = floor((n-1)/3) is the tolerated number of Byzantine nodes and
    q = ceil((n+f+1)/2) is the quorum size. For n = 3f+1 this yields the
    classic q = 2f+1, and for every n >= 4 any two quorums intersect in at
    least f+1 nodes.
    """
    if n < 4:
        raise ConfigurationError(f"n={n} cannot tolerate any Byzantine fault (need n >= 4)")
    f = (n - 1) // 3
    q = -(-(n + f + 1) // 2)
    return f, q


def request_digest(payload: bytes) -> bytes:
    return hashlib.sha256(payload).digest()


def proposal_digest(header: bytes, payload: bytes, metadata: bytes) -> bytes:
    """Digest over all three proposal sections."""
    return proposal_digest_parts(header, hashlib.sha256(payload).digest(), metadata)


def proposal_digest_parts(header: bytes, payload_hash: bytes, metadata: bytes) -> bytes:
    """Same digest, from a precomputed payload hash.

    The payload enters through its hash so that a consumer holding only the
    header and metadata of a block (whose header commits to the payload
    hash) can still recompute the signed digest. Sections are
    length-prefixed so content cannot shift between sections.
    """
    h = hashlib.sha256()
    h.update(len(header).to_bytes(4, "big"))
    h.update(header)
    h.update(payload_hash)
    h.update(len(metadata).to_bytes(4, "big"))
    h.update(metadata)
    return h.digest()


def encode_request_list(payloads: list[bytes] | tuple[bytes, ...]) -> bytes:
    """Canonical encoding of a request batch; fixed as the Proposal.payload
    layout so the library can tell which requests a decision delivered."""
    return Writer().list_(payloads, lambda w, p: w.bytes_(p)).done()


def decode_request_list(buf: bytes) -> list[bytes]:
    r = Reader(buf)
    items = r.list_(lambda rd: rd.bytes_())
    r.expect_end()
    return items


@dataclass(frozen=True)
class Request:
    """An opaque client payload; identity is the hash of the payload."""

    payload: bytes
    digest: bytes

    @classmethod
    def from_payload(cls, payload: bytes) -> "Request":
        return cls(payload=payload, digest=request_digest(payload))

    def encode(self) -> bytes:
        return Writer().bytes_(self.payload).done()

    @classmethod
    def decode(cls, buf: bytes) -> "Request":
        r = Reader(buf)
        payload = r.bytes_()
        r.expect_end()
        return cls.from_payload(payload)


@dataclass(frozen=True)
class ProposalMeta:
    view: ViewNumber
    sequence: SequenceNumber

    def encode(self) -> bytes:
        return Writer().u64(self.view).u64(self.sequence).done()

    @classmethod
    def decode(cls, buf: bytes) -> "ProposalMeta":
        r = Reader(buf)
        meta = cls(view=r.u64(), sequence=r.u64())
        r.expect_end()
        return meta


@dataclass(frozen=True)
class Proposal:
    """Application-assembled content under agreement: three opaque sections
    plus the digest over all of them."""

    header: bytes
    payload: bytes
    metadata: bytes
    digest: bytes = field(repr=False)

    @classmethod
    def make(cls, header: bytes, payload: bytes, metadata: bytes) -> "Proposal":
        return cls(header, payload, metadata, proposal_digest(header, payload, metadata))

    def check_digest(self) -> bool:
        return self.digest == proposal_digest(self.header, self.payload, self.metadata)

    def meta(self) -> ProposalMeta:
        return ProposalMeta.decode(self.metadata)

    def encode(self) -> bytes:
        return Writer().bytes_(self.header).bytes_(self.payload).bytes_(self.metadata).done()

    @classmethod
    def read_from(cls, r: Reader) -> "Proposal":
        return cls.make(r.bytes_(), r.bytes_(), r.bytes_())

    @classmethod
    def decode(cls, buf: bytes) -> "Proposal":
        r = Reader(buf)
        p = cls.read_from(r)
        r.expect_end()
        return p


@dataclass(frozen=True)
class Signature:
    """A consenter's attestation.

    ``message`` carries the exact bytes attested to (a proposal digest for
    commit signatures, a summary encoding for view-change attestations), so
    a signature is verifiable on its own.
    """

    signer: NodeID
    value: bytes
    message: bytes | None = None

    def write_to(self, w: Writer) -> None:
        w.u64(self.signer).bytes_(self.value).optional(self.message, lambda wr, m: wr.bytes_(m))

    @classmethod
    def read_from(cls, r: Reader) -> "Signature":
        return cls(signer=r.u64(), value=r.bytes_(), message=r.optional(lambda rd: rd.bytes_()))

    def encode(self) -> bytes:
        w = Writer()
        self.write_to(w)
        return w.done()

    @classmethod
    def decode(cls, buf: bytes) -> "Signature":
        r = Reader(buf)
        s = cls.read_from(r)
        r.expect_end()
        return s


@dataclass(frozen=True)
class Decision:
    """A proposal together with the quorum of commit signatures over it."""

    proposal: Proposal
    signatures: tuple[Signature, ...]

    def sequence(self) -> SequenceNumber:
        return self.proposal.meta().sequence

    def encode(self) -> bytes:
        w = Writer()
        w.bytes_(self.proposal.encode())
        w.list_(self.signatures, lambda wr, s: s.write_to(wr))
        return w.done()

    @classmethod
    def decode(cls, buf: bytes) -> "Decision":
        r = Reader(buf)
        proposal = Proposal.decode(r.bytes_())
        sigs = tuple(r.list_(Signature.read_from))
        r.expect_end()
        return cls(proposal, sigs)


@dataclass(frozen=True)
class Configuration:
    """The consenter set and all protocol parameters.

    ``consenters`` is an ordered list of (node id, verification key); order
    fixes round-robin leader selection. n, f and q always satisfy the quorum
    arithmetic of :func:`compute_quorum`.
    """

    consenters: tuple[tuple[NodeID, bytes], ...]
    n: int
    f: int
    q: int
    request_forward_timeout: float = 2.0
    request_complaint_timeout: float = 8.0
    leader_heartbeat_timeout: float = 5.0
    heartbeat_interval: float = 1.0
    batch_max_count: int = 100
    batch_timeout: float = 0.5
    sync_lag_threshold: int = 2

    @classmethod
    def build(cls, consenters, **params) -> "Configuration":
        consenters = tuple((int(i), bytes(k)) for i, k in consenters)
        f, q = compute_quorum(len(consenters))
        cfg = cls(consenters=consenters, n=len(consenters), f=f, q=q, **params)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.n != len(self.consenters):
            raise ConfigurationError("n does not match consenter count")
        ids = [i for i, _ in self.consenters]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("duplicate consenter id")
        f, q = compute_quorum(self.n)
        if (self.f, self.q) != (f, q):
            raise ConfigurationError(f"(f={self.f}, q={self.q}) inconsistent with n={self.n}")
        if not (self.request_complaint_timeout > self.request_forward_timeout > 0):
            raise ConfigurationError("need complaint timeout > forward timeout > 0")
        if self.batch_max_count < 1:
            raise ConfigurationError("batch_max_count must be positive")

    def member_ids(self) -> list[NodeID]:
        return [i for i, _ in self.consenters]

    def is_member(self, node: NodeID) -> bool:
        return any(i == node for i, _ in self.consenters)

    def key_of(self, node: NodeID) -> bytes:
        for i, k in self.consenters:
            if i == node:
                return k
        raise KeyError(f"node {node} not in configuration")

    def leader_of(self, view: ViewNumber) -> NodeID:
        return self.consenters[view % self.n][0]

    def encode(self) -> bytes:
        w = Writer()
        w.list_(self.consenters, lambda wr, c: wr.u64(c[0]).bytes_(c[1]))
        w.u64(self.n).u64(self.f).u64(self.q)
        w.duration(self.request_forward_timeout)
        w.duration(self.request_complaint_timeout)
        w.duration(self.leader_heartbeat_timeout)
        w.duration(self.heartbeat_interval)
        w.u64(self.batch_max_count)
        w.duration(self.batch_timeout)
        w.u64(self.sync_lag_threshold)
        return w.done()

    @classmethod
    def read_from(cls, r: Reader) -> "Configuration":
        consenters = tuple(r.list_(lambda rd: (rd.u64(), rd.bytes_())))
        cfg = cls(
            consenters=consenters,
            n=r.u64(),
            f=r.u64(),
            q=r.u64(),
            request_forward_timeout=r.duration(),
            request_complaint_timeout=r.duration(),
            leader_heartbeat_timeout=r.duration(),
            heartbeat_interval=r.duration(),
            batch_max_count=r.u64(),
            batch_timeout=r.duration(),
            sync_lag_threshold=r.u64(),
        )
        cfg.validate()
        return cfg

    @classmethod
    def decode(cls, buf: bytes) -> "Configuration":
        r = Reader(buf)
        cfg = cls.read_from(r)
        r.expect_end()
        return cfg


@dataclass(frozen=True)
class Reconfig:
    """Outcome of a delivery: did the delivered transactions change the
    library configuration, and if so to what."""

    changed: bool
    new_config: Configuration | None = None

    def __post_init__(self) -> None:
        if self.changed and self.new_config is None:
            raise ConfigurationError("changed reconfig must carry the new configuration")

    @classmethod
    def unchanged(cls) -> "Reconfig":
        return cls(changed=False)


__all__ = [
    "DIGEST_SIZE",
    "Configuration",
    "ConfigurationError",
    "Decision",
    "DecodeError",
    "NodeID",
    "Proposal",
    "ProposalMeta",
    "Reconfig",
    "Request",
    "SequenceNumber",
    "Signature",
    "ViewNumber",
    "compute_quorum",
    "decode_request_list",
    "encode_request_list",
    "proposal_digest",
    "proposal_digest_parts",
    "request_digest",
]
