"""The callback contract between the consensus library and its host
application.

The library never interprets request payloads, never hashes blocks and never
holds key material: assembling proposals, validating them, signing, request
admission, durable storage and catch-up replication are all delegated
through this interface. All callbacks are invoked serially from the
library's protocol context; none may block indefinitely.

One structural convention binds both sides: ``Proposal.payload`` is the
canonical request-list encoding (:func:`bftorder.types.encode_request_list`)
of the request payloads the proposal contains. The library relies on it to
prune delivered requests from its pool.
"""

from __future__ import annotations

import abc

from .types import (
    Decision,
    Proposal,
    Reconfig,
    Signature,
    decode_request_list,
    encode_request_list,
)


class VerifyError(Exception):
    """A proposal, signature or request failed application verification.

    ``rule`` names the first violated rule (e.g. ``"bad-previous-hash"``).
    """

    def __init__(self, rule: str, detail: str = "") -> None:
        self.rule = rule
        super().__init__(f"{rule}: {detail}" if detail else rule)


class Application(abc.ABC):
    """What a host must implement to run the consensus library."""

    @abc.abstractmethod
    def assemble(self, metadata: bytes, requests: list[bytes]) -> Proposal:
        """Build a proposal from a non-empty batch, embedding ``metadata``
        verbatim. May use a subset or reorder; omitted requests stay queued."""

    @abc.abstractmethod
    def verify_proposal(self, proposal: Proposal) -> None:
        """Raise VerifyError unless the proposal satisfies the application's
        structural and per-request validity rules."""

    @abc.abstractmethod
    def sign_proposal(self, proposal: Proposal) -> Signature:
        """Sign the proposal digest; the result must carry the digest as its
        attested message and pass verify_signature on every node."""

    @abc.abstractmethod
    def sign_state(self, message: bytes) -> Signature:
        """Sign arbitrary protocol state (view-change attestations)."""

    @abc.abstractmethod
    def verify_signature(self, signature: Signature) -> None:
        """Raise VerifyError unless ``signature.value`` is a valid signature
        by ``signature.signer``'s configured key over ``signature.message``."""

    @abc.abstractmethod
    def verify_request(self, payload: bytes) -> None:
        """Raise VerifyError unless the payload is a well-formed, authorized,
        not-yet-delivered request under the current configuration."""

    @abc.abstractmethod
    def deliver(self, decision: Decision) -> Reconfig:
        """Store the decision durably before returning; report whether any
        delivered transaction changed the configuration. The library may
        dispose of the decision once this returns."""

    @abc.abstractmethod
    def sync(self) -> tuple[Decision | None, Reconfig]:
        """Pull and store missing decisions from peers, each verified to
        carry a quorum of valid signatures; return the most recent local
        decision and the net configuration effect. On unreachable peers,
        return the current local latest with an unchanged Reconfig."""


class NullApplication(Application):
    """Empty implementations for hosts that need none of the hooks.

    Assemble is the identity batch encoding, verification always passes,
    signatures are structural stand-ins, and delivered decisions are kept
    in an in-memory log.
    """

    def __init__(self, node_id: int) -> None:
        self.node_id = node_id
        self.delivered: list[Decision] = []

    def assemble(self, metadata: bytes, requests: list[bytes]) -> Proposal:
        return Proposal.make(b"", encode_request_list(requests), metadata)

    def verify_proposal(self, proposal: Proposal) -> None:
        if not proposal.check_digest():
            raise VerifyError("digest-mismatch")
        decode_request_list(proposal.payload)

    def sign_proposal(self, proposal: Proposal) -> Signature:
        return self.sign_state(proposal.digest)

    def sign_state(self, message: bytes) -> Signature:
        return Signature(self.node_id, b"null:%d" % self.node_id, message)

    def verify_signature(self, signature: Signature) -> None:
        if signature.message is None:
            raise VerifyError("missing-attested-content")
        if signature.value != b"null:%d" % signature.signer:
            raise VerifyError("bad-signature")

    def verify_request(self, payload: bytes) -> None:
        return None

    def deliver(self, decision: Decision) -> Reconfig:
        if not self.delivered or decision.sequence() > self.delivered[-1].sequence():
            self.delivered.append(decision)
        return Reconfig.unchanged()

    def sync(self) -> tuple[Decision | None, Reconfig]:
        latest = self.delivered[-1] if self.delivered else None
        return latest, Reconfig.unchanged()
