"""Per-node consensus state machine.

Normal case is the classic three-phase exchange with a single in-flight
proposal per leader: the leader assembles and pre-prepares a batch,
followers verify and broadcast signed prepares, a quorum of prepares
releases signed commits, and a quorum of valid commit signatures forms the
decision handed to the application. There is no pipelining: sequence s+1
cannot start anywhere before deliver(s) returned.

Leader replacement runs a three-message synchronization phase: view-change
votes, signed view-data summaries sent to the incoming leader, and a
new-view that embeds a quorum of those summaries. Every receiver recomputes
the leader's safe-proposal selection from the embedded summaries, so an
unjustified new-view is rejected and escalated.

Prepared certificates are the safety anchor across views. A node keeps its
certificate until the sequence it covers is decided or a justified new-view
proves the slot undecided; prepares are individually signed exactly so these
certificates are verifiable by third parties inside view-data.
"""

from __future__ import annotations

import enum
import logging
from typing import Callable

from .contract import Application, VerifyError
from .messages import (
    Commit,
    ConsensusMessage,
    ForwardedRequest,
    Heartbeat,
    NewView,
    Prepare,
    PreparedCertificate,
    PrePrepare,
    ViewChange,
    ViewData,
    prepare_attestation,
)
from .pool import EnqueueResult, RequestPool
from .transport import Scheduler, TimerHandle, Transport
from .types import (
    Configuration,
    Decision,
    NodeID,
    Proposal,
    ProposalMeta,
    Signature,
    decode_request_list,
    request_digest,
)
from .wal import PHASE_COMMIT, PHASE_PREPARE, PHASE_VIEW, WalRecord, WriteAheadLog

logger = logging.getLogger(__name__)


class Phase(enum.Enum):
    IDLE = "idle"
    PREPREPARED = "preprepared"
    PREPARED = "prepared"


class ConsensusEngine:
    """One logical event loop: feed it messages, timers fire through the
    scheduler, and all application callbacks run from inside those calls."""

    def __init__(
        self,
        node_id: NodeID,
        configuration: Configuration,
        application: Application,
        transport: Transport,
        scheduler: Scheduler,
        wal: WriteAheadLog,
        *,
        initial_sequence: int = 1,
        initial_last_digest: bytes = b"",
    ) -> None:
        self.node_id = node_id
        self.config = configuration
        self.app = application
        self.transport = transport
        self.scheduler = scheduler
        self.wal = wal

        self.current_view = 0
        self.next_sequence = initial_sequence
        self.last_delivered_digest = initial_last_digest
        self.phase = Phase.IDLE
        self.in_flight: Proposal | None = None
        self._prepares: dict[NodeID, Signature] = {}
        self._commits: dict[NodeID, Signature] = {}
        self._prepare_buf: dict[bytes, dict[NodeID, Signature]] = {}
        self._commit_buf: dict[bytes, dict[NodeID, Signature]] = {}
        self.prepared_certificate: PreparedCertificate | None = None
        self._certified_proposal: Proposal | None = None
        self._wal_lock: tuple[int, int, bytes] | None = None

        self.in_view_change = False
        self._vc_target: int | None = None
        self._vc_votes: dict[int, set[NodeID]] = {}
        self._vc_data: dict[int, dict[NodeID, ViewData]] = {}
        self._vc_data_sent_for: int | None = None
        self._newview_sent_for: int | None = None
        self._future_view_senders: dict[int, set[NodeID]] = {}
        self._future_msgs: dict[int, list[tuple[NodeID, ConsensusMessage]]] = {}

        self.pool = RequestPool(
            batch_max_count=configuration.batch_max_count,
            batch_timeout=configuration.batch_timeout,
            forward_timeout=configuration.request_forward_timeout,
            complaint_timeout=configuration.request_complaint_timeout,
        )

        self._running = False
        self._sync_active = False
        self._current_batch: list[bytes] = []
        self._frontier_hint = self.next_sequence
        self._last_leader_seen = 0.0
        self._last_stale_reply: dict[NodeID, float] = {}
        self._hb_timer: TimerHandle | None = None
        self._liveness_timer: TimerHandle | None = None
        self._batch_timer: TimerHandle | None = None
        self._vc_timer: TimerHandle | None = None
        self._settle_timer: TimerHandle | None = None

        self.evidence: list[dict] = []
        self.on_event: Callable[[str, dict], None] | None = None

        self._restore_from_wal()

    # -- lifecycle ----------------------------------------------------------

    def _restore_from_wal(self) -> None:
        record = self.wal.read_latest()
        if record is None:
            return
        self.current_view = max(self.current_view, record.view)
        if record.phase in (PHASE_PREPARE, PHASE_COMMIT) and record.digest is not None:
            self._wal_lock = (record.view, record.sequence, record.digest)
        if record.certificate is not None and record.certificate.sequence >= self.next_sequence:
            self.prepared_certificate = record.certificate

    def start(self) -> None:
        self._running = True
        self._last_leader_seen = self.scheduler.now()
        self._arm_role_timers()
        self._emit("start", view=self.current_view, sequence=self.next_sequence)

    def stop(self) -> None:
        self._running = False
        for handle in (self._hb_timer, self._liveness_timer, self._batch_timer,
                       self._vc_timer, self._settle_timer):
            if handle is not None:
                handle.cancel()

    @property
    def leader(self) -> NodeID:
        return self.config.leader_of(self.current_view)

    def is_leader(self) -> bool:
        return self.leader == self.node_id

    def is_member(self) -> bool:
        return self.config.is_member(self.node_id)

    def _emit(self, kind: str, **fields) -> None:
        if self.on_event is not None:
            self.on_event(kind, fields)

    # -- library entry points ------------------------------------------------

    def submit_request(self, payload: bytes) -> EnqueueResult:
        """Queue an application-validated request. FULL is the backpressure
        signal; the request was not queued."""
        if not self._running:
            raise RuntimeError("engine not started")
        now = self.scheduler.now()
        result = self.pool.enqueue(payload, now)
        if result is EnqueueResult.OK:
            self._arm_request_timers(payload)
            self._maybe_propose()
        return result

    def handle_message(self, sender: NodeID, message: ConsensusMessage) -> None:
        """Route one authenticated message; invalid or stale input is logged
        and dropped, never raised (Byzantine input is expected)."""
        if not self._running:
            return
        if sender == self.node_id:
            return
        try:
            if isinstance(message, PrePrepare):
                self._on_preprepare(sender, message)
            elif isinstance(message, Prepare):
                self._on_prepare(sender, message)
            elif isinstance(message, Commit):
                self._on_commit(sender, message)
            elif isinstance(message, ViewChange):
                self._on_viewchange(sender, message)
            elif isinstance(message, ViewData):
                self._on_viewdata(sender, message)
            elif isinstance(message, NewView):
                self._on_newview(sender, message)
            elif isinstance(message, Heartbeat):
                self._on_heartbeat(sender, message)
            elif isinstance(message, ForwardedRequest):
                self._on_forwarded(sender, message)
        except VerifyError as exc:
            self._emit("dropped", sender=sender, reason=str(exc))
        except Exception:
            logger.exception("node %d: error handling %r from %d", self.node_id, message, sender)

    # -- proposing (leader) ---------------------------------------------------

    def _maybe_propose(self) -> None:
        if not (self._running and self.is_leader() and self.is_member()
                and self.phase is Phase.IDLE and not self.in_view_change):
            return
        now = self.scheduler.now()
        batch = self.pool.cut_batch(now)
        batch = self._filter_batch(batch)
        if not batch:
            self._arm_batch_timer()
            return
        self._current_batch = batch
        meta = ProposalMeta(self.current_view, self.next_sequence).encode()
        proposal = self.app.assemble(meta, batch)
        if proposal.metadata != meta or not proposal.check_digest():
            raise RuntimeError("assembler violated the proposal contract")
        included = set(decode_request_list(proposal.payload))
        self.pool.restore([p for p in batch if p not in included])
        self._emit("preprepare_sent", view=self.current_view, sequence=self.next_sequence,
                   digest=proposal.digest.hex(), txs=len(included))
        self._broadcast_preprepare(proposal)
        self._accept_preprepare(proposal)

    def _broadcast_preprepare(self, proposal: Proposal) -> None:
        # split out so Byzantine test doubles can equivocate
        self.transport.broadcast(PrePrepare(proposal))

    def _filter_batch(self, batch: list[bytes]) -> list[bytes]:
        # hook for fault injection (censoring leaders); honest nodes pass through
        return batch

    # -- normal case ------------------------------------------------------------

    def _on_preprepare(self, sender: NodeID, message: PrePrepare) -> None:
        proposal = message.proposal
        if not proposal.check_digest():
            self._emit("dropped", sender=sender, reason="digest-mismatch")
            return
        try:
            meta = proposal.meta()
        except Exception:
            self._emit("dropped", sender=sender, reason="bad-metadata")
            return
        self._emit("preprepare_recv", sender=sender, view=meta.view,
                   sequence=meta.sequence, digest=proposal.digest.hex())
        if sender == self.leader:
            self._last_leader_seen = self.scheduler.now()
        if meta.sequence < self.next_sequence:
            self._reply_stale(sender)
            return
        if meta.sequence > self.next_sequence:
            self._note_frontier(meta.sequence)
            return
        if self.in_view_change or meta.view != self.current_view:
            self._note_future_view(sender, meta.view, message)
            return
        if sender != self.leader:
            self._emit("dropped", sender=sender, reason="preprepare-not-from-leader")
            return
        if self.in_flight is not None:
            if proposal.digest != self.in_flight.digest:
                self.evidence.append({
                    "kind": "equivocation", "leader": sender, "view": meta.view,
                    "sequence": meta.sequence,
                    "digests": [self.in_flight.digest.hex(), proposal.digest.hex()],
                })
                self._emit("equivocation", leader=sender, view=meta.view, sequence=meta.sequence)
                self.start_view_change(self.current_view + 1)
            return
        if not self.is_member():
            return
        try:
            self.app.verify_proposal(proposal)
        except VerifyError as exc:
            self._emit("dropped", sender=sender, reason=f"verify-proposal:{exc.rule}")
            return
        self._accept_preprepare(proposal)

    def _accept_preprepare(self, proposal: Proposal) -> None:
        view, seq = self.current_view, self.next_sequence
        if self._wal_lock is not None:
            lview, lseq, ldigest = self._wal_lock
            if (lview, lseq) == (view, seq) and ldigest != proposal.digest:
                self._emit("vote_withheld", view=view, sequence=seq)
                return
        self.wal.append(WalRecord(view, seq, PHASE_PREPARE, digest=proposal.digest))
        self.in_flight = proposal
        self.phase = Phase.PREPREPARED
        attestation = prepare_attestation(view, seq, proposal.digest)
        own = self.app.sign_state(attestation)
        self._prepares = {self.node_id: own}
        self._commits = {}
        # fold in any prepares/commits that raced ahead of the proposal
        for signer, sig in self._prepare_buf.pop(proposal.digest, {}).items():
            self._prepares.setdefault(signer, sig)
        for signer, sig in self._commit_buf.pop(proposal.digest, {}).items():
            self._commits.setdefault(signer, sig)
        self._prepare_buf.clear()
        self._commit_buf.clear()
        self._emit("prepare_sent", view=view, sequence=seq, digest=proposal.digest.hex())
        self.transport.broadcast(Prepare(view, seq, proposal.digest, own))
        self._check_prepared()
        self._check_committed()

    def _validate_prepare_sig(self, sender: NodeID, message: Prepare) -> bool:
        sig = message.signature
        expected = prepare_attestation(message.view, message.sequence, message.digest)
        if sig.signer != sender or sig.message != expected:
            return False
        if not self.config.is_member(sender):
            return False
        try:
            self.app.verify_signature(sig)
        except VerifyError:
            return False
        return True

    def _on_prepare(self, sender: NodeID, message: Prepare) -> None:
        if message.sequence < self.next_sequence:
            self._reply_stale(sender)
            return
        if message.sequence > self.next_sequence:
            self._note_frontier(message.sequence)
            return
        if self.in_view_change or message.view != self.current_view:
            self._note_future_view(sender, message.view, message)
            return
        if not self._validate_prepare_sig(sender, message):
            self._emit("dropped", sender=sender, reason="bad-prepare-signature")
            return
        if self.in_flight is None:
            self._prepare_buf.setdefault(message.digest, {})[sender] = message.signature
            return
        if message.digest != self.in_flight.digest:
            return
        self._prepares[sender] = message.signature
        self._check_prepared()

    def _check_prepared(self) -> None:
        if self.phase is not Phase.PREPREPARED or self.in_flight is None:
            return
        if len(self._prepares) < self.config.q:
            return
        view, seq = self.current_view, self.next_sequence
        digest = self.in_flight.digest
        prepares = tuple(sorted(self._prepares.values(), key=lambda s: s.signer))
        cert = PreparedCertificate(view, seq, digest, prepares[: self.config.q])
        self.wal.append(WalRecord(view, seq, PHASE_COMMIT, digest=digest, certificate=cert))
        self.prepared_certificate = cert
        self._certified_proposal = self.in_flight
        commit_sig = self.app.sign_proposal(self.in_flight)
        self._commits[self.node_id] = commit_sig
        self.phase = Phase.PREPARED
        self._emit("commit_sent", view=view, sequence=seq, digest=digest.hex())
        self.transport.broadcast(Commit(view, seq, digest, commit_sig))
        self._check_committed()

    def _validate_commit_sig(self, sender: NodeID, message: Commit) -> bool:
        sig = message.signature
        if sig.signer != sender or sig.message != message.digest:
            return False
        if not self.config.is_member(sender):
            return False
        try:
            self.app.verify_signature(sig)
        except VerifyError:
            return False
        return True

    def _on_commit(self, sender: NodeID, message: Commit) -> None:
        if message.sequence < self.next_sequence:
            self._reply_stale(sender)
            return
        if message.sequence > self.next_sequence:
            self._note_frontier(message.sequence)
            return
        if self.in_view_change or message.view != self.current_view:
            self._note_future_view(sender, message.view, message)
            return
        if not self._validate_commit_sig(sender, message):
            self._emit("dropped", sender=sender, reason="bad-commit-signature")
            return
        if self.in_flight is None:
            self._commit_buf.setdefault(message.digest, {})[sender] = message.signature
            return
        if message.digest != self.in_flight.digest:
            return
        self._commits[sender] = message.signature
        self._check_committed()

    def _check_committed(self) -> None:
        """Deliver on a commit quorum, preferring the canonical certificate.

        The stored signature set must be byte-identical on every node, so we
        first wait for commits from the q lowest-id members; if any of those
        are down, a settle window lets every node converge on the same
        fallback set before delivering with whatever quorum it holds.
        """
        if self.in_flight is None or len(self._commits) < self.config.q:
            return
        if self.phase is Phase.IDLE:
            return
        canonical = self.config.member_ids()[: self.config.q]
        if all(member in self._commits for member in canonical):
            signatures = tuple(self._commits[m] for m in sorted(canonical))
            self._cancel_settle()
            self._deliver(Decision(self.in_flight, signatures))
            return
        if self._settle_timer is None:
            seq = self.next_sequence
            self._settle_timer = self.scheduler.call_later(
                self.config.heartbeat_interval, lambda: self._settle_delivery(seq))

    def _settle_delivery(self, sequence: int) -> None:
        self._settle_timer = None
        if not self._running or self.next_sequence != sequence:
            return
        if self.in_flight is None or len(self._commits) < self.config.q:
            return
        signatures = tuple(sorted(self._commits.values(),
                                  key=lambda s: s.signer))[: self.config.q]
        self._deliver(Decision(self.in_flight, signatures))

    def _cancel_settle(self) -> None:
        if self._settle_timer is not None:
            self._settle_timer.cancel()
            self._settle_timer = None

    def _deliver(self, decision: Decision) -> None:
        seq = self.next_sequence
        reconfig = self.app.deliver(decision)
        payloads = decode_request_list(decision.proposal.payload)
        self.pool.prune_delivered(payloads)
        self.last_delivered_digest = decision.proposal.digest
        self.next_sequence = seq + 1
        self._frontier_hint = max(self._frontier_hint, self.next_sequence)
        self._clear_slot()
        self._emit("decide", sequence=seq, view=decision.proposal.meta().view,
                   digest=decision.proposal.digest.hex(),
                   signers=[s.signer for s in decision.signatures],
                   signatures=[(s.signer, s.value.hex()) for s in decision.signatures],
                   txs=len(payloads))
        if reconfig.changed and reconfig.new_config is not None:
            self._apply_new_config(reconfig.new_config)
        self._maybe_propose()

    def _clear_slot(self) -> None:
        self.phase = Phase.IDLE
        self.in_flight = None
        self._prepares = {}
        self._commits = {}
        self._prepare_buf.clear()
        self._commit_buf.clear()
        self._cancel_settle()
        if self.prepared_certificate is not None and \
                self.prepared_certificate.sequence < self.next_sequence:
            self.prepared_certificate = None
            self._certified_proposal = None

    # -- reconfiguration ---------------------------------------------------------

    def _apply_new_config(self, configuration: Configuration) -> None:
        configuration.validate()
        self.config = configuration
        self.pool.batch_max_count = configuration.batch_max_count
        self.pool.batch_timeout = configuration.batch_timeout
        self.pool.forward_timeout = configuration.request_forward_timeout
        self.pool.complaint_timeout = configuration.request_complaint_timeout
        evicted = self.pool.reverify_all(self.app.verify_request)
        self._emit("reconfigured", n=configuration.n, q=configuration.q,
                   evicted=[d.hex() for d in evicted])
        self._last_leader_seen = self.scheduler.now()
        self._arm_role_timers()

    # -- censorship defense timers -------------------------------------------------

    def _arm_request_timers(self, payload: bytes) -> None:
        digest = request_digest(payload)
        entry = self.pool.get(digest)
        if entry is None:
            return
        now = self.scheduler.now()
        self.scheduler.call_later(max(entry.forward_deadline - now, 0.0),
                                  lambda: self._forward_timeout(digest))
        self.scheduler.call_later(max(entry.complaint_deadline - now, 0.0),
                                  lambda: self._complaint_timeout(digest))

    def _forward_timeout(self, digest: bytes) -> None:
        if not self._running:
            return
        entry = self.pool.get(digest)
        if entry is None or entry.forwarded:
            return
        now = self.scheduler.now()
        if now + 1e-9 < entry.forward_deadline:
            self.scheduler.call_later(entry.forward_deadline - now,
                                      lambda: self._forward_timeout(digest))
            return
        if self.is_leader() or not self.is_member():
            return
        entry.forwarded = True
        self._emit("forwarded", digest=digest.hex(), to=self.leader)
        self.transport.send(self.leader, ForwardedRequest(entry.request.payload))

    def _complaint_timeout(self, digest: bytes) -> None:
        if not self._running:
            return
        entry = self.pool.get(digest)
        if entry is None:
            return
        now = self.scheduler.now()
        if now + 1e-9 < entry.complaint_deadline:
            self.scheduler.call_later(entry.complaint_deadline - now,
                                      lambda: self._complaint_timeout(digest))
            return
        if not self.is_member():
            return
        # if the cluster is ahead of us the stall is our own: catch up first
        if self._frontier_hint > self.next_sequence and self._try_sync():
            self.scheduler.call_later(self.pool.complaint_timeout,
                                      lambda: self._complaint_timeout(digest))
            return
        self._emit("complaint", digest=digest.hex(), view=self.current_view)
        self.start_view_change(self.current_view + 1)

    def _on_forwarded(self, sender: NodeID, message: ForwardedRequest) -> None:
        try:
            self.app.verify_request(message.payload)
        except VerifyError as exc:
            self._emit("dropped", sender=sender, reason=f"forwarded:{exc.rule}")
            return
        if self.pool.enqueue(message.payload, self.scheduler.now()) is EnqueueResult.OK:
            self._arm_request_timers(message.payload)
            self._maybe_propose()

    # -- heartbeats and liveness -----------------------------------------------------

    def _arm_role_timers(self) -> None:
        if not self._running:
            return
        if self._hb_timer is not None:
            self._hb_timer.cancel()
        if self._liveness_timer is not None:
            self._liveness_timer.cancel()
        if not self.is_member():
            return
        if self.is_leader():
            self._hb_timer = self.scheduler.call_later(
                self.config.heartbeat_interval, self._heartbeat_tick)
            self._maybe_propose()
        else:
            self._liveness_timer = self.scheduler.call_later(
                self.config.heartbeat_interval, self._liveness_tick)

    def _heartbeat_tick(self) -> None:
        if not self._running or not self.is_leader() or not self.is_member():
            return
        if self.phase is Phase.IDLE and not self.in_view_change:
            self.transport.broadcast(Heartbeat(self.current_view, self.next_sequence))
        self._hb_timer = self.scheduler.call_later(
            self.config.heartbeat_interval, self._heartbeat_tick)

    def _liveness_tick(self) -> None:
        if not self._running or self.is_leader() or not self.is_member():
            return
        now = self.scheduler.now()
        if not self.in_view_change and \
                now - self._last_leader_seen > self.config.leader_heartbeat_timeout:
            self._emit("leader_timeout", view=self.current_view)
            self.start_view_change(self.current_view + 1)
        self._liveness_timer = self.scheduler.call_later(
            self.config.heartbeat_interval, self._liveness_tick)

    def _on_heartbeat(self, sender: NodeID, message: Heartbeat) -> None:
        if sender == self.leader and message.view == self.current_view:
            self._last_leader_seen = self.scheduler.now()
        self._note_future_view(sender, message.view)
        self._note_frontier(message.next_sequence)

    def _reply_stale(self, sender: NodeID) -> None:
        """Tell a lagging sender where the frontier is, rate-limited."""
        now = self.scheduler.now()
        last = self._last_stale_reply.get(sender, -1e9)
        if now - last >= self.config.heartbeat_interval:
            self._last_stale_reply[sender] = now
            self.transport.send(sender, Heartbeat(self.current_view, self.next_sequence))

    # -- falling behind ------------------------------------------------------------------

    def maybe_trigger_sync(self, observed_sequence: int) -> None:
        """Note a sequence observed in traffic; catch up through the
        application once the gap reaches the configured threshold."""
        self._note_frontier(observed_sequence)

    def trigger_sync(self) -> bool:
        """Unconditional catch-up (restart/recovery path)."""
        return self._try_sync()

    def _note_frontier(self, claimed_next: int) -> None:
        if claimed_next > self._frontier_hint:
            self._frontier_hint = claimed_next
        gap = self._frontier_hint - self.next_sequence
        if gap >= self.config.sync_lag_threshold:
            self._try_sync()

    def _try_sync(self) -> bool:
        """Run the application's catch-up; True if the frontier advanced."""
        if self._sync_active:
            return False
        self._sync_active = True
        try:
            decision, reconfig = self.app.sync()
        finally:
            self._sync_active = False
        advanced = False
        if decision is not None:
            frontier = decision.sequence() + 1
            if frontier > self.next_sequence:
                self.next_sequence = frontier
                self.last_delivered_digest = decision.proposal.digest
                self._clear_slot()
                evicted = self.pool.reverify_all(self.app.verify_request)
                self.pool.reset_complaints(self.scheduler.now())
                advanced = True
                self._emit("synced", sequence=decision.sequence(), evicted=len(evicted))
        if reconfig.changed and reconfig.new_config is not None:
            self._apply_new_config(reconfig.new_config)
            advanced = True
        if advanced:
            self._maybe_propose()
        return advanced

    def _note_future_view(self, sender: NodeID, view: int,
                          message: ConsensusMessage | None = None) -> None:
        """Normal-case traffic for a higher view: buffer it (a new-view may
        still be in flight behind it), and treat it as evidence the cluster
        moved on. Once f+1 distinct members vouch for a view we adopt the
        view number outright (the rejoin-after-partition path)."""
        if view <= self.current_view or not self.config.is_member(sender):
            return
        if message is not None:
            pending = self._future_msgs.setdefault(view, [])
            if len(pending) < 8 * self.config.n:
                pending.append((sender, message))
        senders = self._future_view_senders.setdefault(view, set())
        senders.add(sender)
        if len(senders) >= self.config.f + 1:
            self._emit("view_followed", view=view)
            self.current_view = view
            self._finish_view_entry(view)
            if self._frontier_hint > self.next_sequence:
                self._try_sync()
            self._drain_future(view)

    def _drain_future(self, view: int) -> None:
        replay: list[tuple[NodeID, ConsensusMessage]] = []
        for stale in [v for v in self._future_msgs if v <= view]:
            buffered = self._future_msgs.pop(stale)
            if stale == view:
                replay = buffered
        for sender, message in replay:
            self.handle_message(sender, message)

    # -- view change ----------------------------------------------------------------------

    def start_view_change(self, target: int) -> None:
        if not self._running or not self.is_member():
            return
        if target <= self.current_view:
            return
        if self._vc_target is not None and self._vc_target >= target:
            return
        self._vc_target = target
        self.in_view_change = True
        self._vc_data_sent_for = None
        self.pool.restore(self.pool.pending_payloads())
        self._emit("viewchange_sent", target=target)
        self._vc_votes.setdefault(target, set()).add(self.node_id)
        self.transport.broadcast(ViewChange(target))
        if self._vc_timer is not None:
            self._vc_timer.cancel()
        self._vc_timer = self.scheduler.call_later(
            self.config.request_complaint_timeout, self._vc_stalled)
        self._evaluate_viewchange(target)

    def _vc_stalled(self) -> None:
        if not (self._running and self.in_view_change and self._vc_target is not None):
            return
        votes = self._vc_votes.get(self._vc_target, set())
        if votes == {self.node_id}:
            # nobody else wants this view; stop sulking and rejoin the old one
            self._emit("viewchange_aborted", target=self._vc_target)
            self.in_view_change = False
            self._vc_target = None
            self.pool.reset_complaints(self.scheduler.now())
            self._last_leader_seen = self.scheduler.now()
            self._arm_role_timers()
            return
        self._emit("viewchange_stalled", target=self._vc_target)
        self.start_view_change(self._vc_target + 1)

    def _on_viewchange(self, sender: NodeID, message: ViewChange) -> None:
        target = message.target_view
        if target <= self.current_view or not self.config.is_member(sender):
            return
        self._vc_votes.setdefault(target, set()).add(sender)
        self._evaluate_viewchange(target)

    def _evaluate_viewchange(self, target: int) -> None:
        votes = self._vc_votes.get(target, set())
        # join once f+1 members want this view, even if our timers are quiet
        if len(votes) >= self.config.f + 1 and (self._vc_target or -1) < target:
            self.start_view_change(target)
            return
        if len(votes) >= self.config.q and self._vc_target == target \
                and self._vc_data_sent_for != target:
            self._send_view_data(target)

    def _send_view_data(self, target: int) -> None:
        self._vc_data_sent_for = target
        cert = None
        proposal = None
        if self.prepared_certificate is not None \
                and self.prepared_certificate.sequence == self.next_sequence:
            cert = self.prepared_certificate
            proposal = self._certified_proposal
        vd = ViewData(
            target_view=target,
            last_delivered=self.next_sequence - 1,
            last_digest=self.last_delivered_digest,
            certificate=cert,
            certified_proposal=proposal,
        )
        vd = vd.signed(self.app.sign_state(vd.summary_bytes()))
        leader = self.config.leader_of(target)
        self._emit("viewdata_sent", target=target, to=leader, has_cert=cert is not None)
        if leader == self.node_id:
            self._collect_view_data(self.node_id, vd)
        else:
            self.transport.send(leader, vd)

    def _validate_view_data(self, sender: NodeID, vd: ViewData, target: int) -> bool:
        if vd.target_view != target or vd.signature is None:
            return False
        sig = vd.signature
        if sig.signer != sender or sig.message != vd.summary_bytes():
            return False
        if not self.config.is_member(sender):
            return False
        try:
            self.app.verify_signature(sig)
        except VerifyError:
            return False
        cert = vd.certificate
        if cert is not None:
            if cert.sequence != vd.last_delivered + 1 or cert.view >= target:
                return False
            if not self._validate_certificate(cert):
                return False
            if vd.certified_proposal is None or vd.certified_proposal.digest != cert.digest:
                return False
            if not vd.certified_proposal.check_digest():
                return False
            try:
                meta = vd.certified_proposal.meta()
            except Exception:
                return False
            if meta.sequence != cert.sequence or meta.view > cert.view:
                return False
        elif vd.certified_proposal is not None:
            return False
        return True

    def _validate_certificate(self, cert: PreparedCertificate) -> bool:
        expected = prepare_attestation(cert.view, cert.sequence, cert.digest)
        signers = set()
        for sig in cert.prepares:
            if sig.message != expected or not self.config.is_member(sig.signer):
                return False
            try:
                self.app.verify_signature(sig)
            except VerifyError:
                return False
            signers.add(sig.signer)
        return len(signers) >= self.config.q

    def _on_viewdata(self, sender: NodeID, vd: ViewData) -> None:
        target = vd.target_view
        if target <= self.current_view:
            return
        if self.config.leader_of(target) != self.node_id:
            return
        if not self._validate_view_data(sender, vd, target):
            self._emit("dropped", sender=sender, reason="bad-viewdata")
            return
        # a valid signed summary doubles as that node's vote for the view
        self._vc_votes.setdefault(target, set()).add(sender)
        self._collect_view_data(sender, vd)
        self._evaluate_viewchange(target)

    def _collect_view_data(self, sender: NodeID, vd: ViewData) -> None:
        target = vd.target_view
        collected = self._vc_data.setdefault(target, {})
        collected.setdefault(sender, vd)
        if len(collected) >= self.config.q and self._newview_sent_for != target:
            self._broadcast_new_view(target)

    @staticmethod
    def _select_safe_proposal(view_data: tuple[ViewData, ...], f: int):
        """The deterministic selection every node recomputes: frontier is the
        (f+1)-th highest delivered claim (immune to f exaggerators), and any
        certificate at the next sequence wins, highest certificate view first."""
        claims = sorted((vd.last_delivered for vd in view_data), reverse=True)
        frontier = claims[f] if f < len(claims) else claims[-1]
        contested = frontier + 1
        best: ViewData | None = None
        for vd in view_data:
            cert = vd.certificate
            if cert is None or cert.sequence != contested:
                continue
            if best is None or (cert.view, cert.digest) > \
                    (best.certificate.view, best.certificate.digest):
                best = vd
        return frontier, best

    def _broadcast_new_view(self, target: int) -> None:
        self._newview_sent_for = target
        collected = self._vc_data[target]
        chosen = tuple(collected[s] for s in sorted(collected)[: self.config.q])
        frontier, best = self._select_safe_proposal(chosen, self.config.f)
        if frontier > self.next_sequence - 1:
            self._try_sync()
        reproposal = best.certified_proposal if best is not None else None
        nv = NewView(target, chosen, reproposal)
        self._emit("newview_sent", target=target, frontier=frontier,
                   reproposal=reproposal.digest.hex() if reproposal else None)
        self.transport.broadcast(nv)
        self._adopt_view(nv)

    def _on_newview(self, sender: NodeID, nv: NewView) -> None:
        target = nv.target_view
        if target <= self.current_view:
            return
        if sender != self.config.leader_of(target):
            self._emit("dropped", sender=sender, reason="newview-not-from-leader")
            return
        signers = set()
        for vd in nv.view_data:
            vd_sender = vd.signature.signer if vd.signature else -1
            if not self._validate_view_data(vd_sender, vd, target):
                self._emit("dropped", sender=sender, reason="newview-bad-viewdata")
                return
            signers.add(vd_sender)
        if len(signers) < self.config.q:
            self._emit("dropped", sender=sender, reason="newview-short-quorum")
            return
        frontier, best = self._select_safe_proposal(nv.view_data, self.config.f)
        expected = best.certificate.digest if best is not None else None
        got = nv.reproposal.digest if nv.reproposal is not None else None
        if expected != got:
            # the embedded summaries do not justify the leader's choice
            self._emit("newview_rejected", target=target, leader=sender)
            self.start_view_change(target + 1)
            return
        self._last_leader_seen = self.scheduler.now()
        self._adopt_view(nv)

    def _adopt_view(self, nv: NewView) -> None:
        target = nv.target_view
        frontier, best = self._select_safe_proposal(nv.view_data, self.config.f)
        keep_cert = self.prepared_certificate
        keep_proposal = self._certified_proposal
        self.current_view = target
        self._clear_slot()
        contested = frontier + 1
        justified_without_us = best is None or (
            keep_cert is not None and best.certificate.digest != keep_cert.digest)
        if keep_cert is not None and keep_cert.sequence == self.next_sequence \
                and not justified_without_us:
            # our certificate is (still) the selected value; keep holding it
            self.prepared_certificate = keep_cert
            self._certified_proposal = keep_proposal
        self._emit("view_adopted", view=target, frontier=frontier,
                   leader=self.config.leader_of(target))
        self._finish_view_entry(target)
        if contested < self.next_sequence:
            pass  # slot already decided locally; others will catch up
        elif contested > self.next_sequence:
            self._note_frontier(contested)
        elif nv.reproposal is not None:
            try:
                self.app.verify_proposal(nv.reproposal)
                self._accept_preprepare(nv.reproposal)
            except VerifyError as exc:
                # abstain; the value can still commit among up-to-date nodes
                self._emit("dropped", reason=f"reproposal:{exc.rule}", sender=self.leader)
        else:
            self._maybe_propose()
        self._drain_future(target)

    def _finish_view_entry(self, view: int) -> None:
        """State shared by every way of entering a view: clear the change
        machinery, persist the adoption, re-arm timers and deadline windows."""
        self.in_view_change = False
        self._vc_target = None
        self._vc_data_sent_for = None
        if self._vc_timer is not None:
            self._vc_timer.cancel()
            self._vc_timer = None
        for table in (self._vc_votes, self._vc_data, self._future_view_senders):
            for stale in [v for v in table if v <= view]:
                del table[stale]
        self.wal.append(WalRecord(view, self.next_sequence, PHASE_VIEW,
                                  certificate=self.prepared_certificate))
        self.pool.on_view_change(self.scheduler.now())
        for payload in self.pool.pending_payloads():
            self._arm_request_timers(payload)
        self._last_leader_seen = self.scheduler.now()
        self._arm_role_timers()

    # -- batching ---------------------------------------------------------------------------

    def _arm_batch_timer(self) -> None:
        if not (self.is_leader() and self.phase is Phase.IDLE):
            return
        deadline = self.pool.next_batch_deadline()
        if deadline is None:
            return
        if self._batch_timer is not None:
            self._batch_timer.cancel()
        delay = max(deadline - self.scheduler.now(), 0.0)
        self._batch_timer = self.scheduler.call_later(delay, self._maybe_propose)
