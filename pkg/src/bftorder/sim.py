"""Simulated cluster harness: builds ordering nodes over the deterministic
network, injects scenario faults, drives a closed-loop workload, and records
per-node event logs for the invariant checker."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from pathlib import Path

from . import keys
from .blocks import Block, ConsortiumConfig, Transaction, TxKind
from .contract import VerifyError
from .engine import ConsensusEngine
from .messages import Commit, Prepare, PrePrepare, prepare_attestation
from .ordering import BlockStore, OrderingApp
from .pool import EnqueueResult
from .scenario import Scenario, latency_model
from .simnet import Partition, SimNetwork
from .types import Configuration, request_digest
from .wal import MemoryWal

CENSOR_MARK = b"\xc3CENSOR\xc3"


@dataclass
class NodeFaults:
    crash_at: float | None = None
    restart_at: float | None = None
    equivocate: bool = False
    censor_marked: bool = False
    forge_served_blocks: bool = False

    def hampers_consensus(self) -> bool:
        return self.equivocate or self.censor_marked

    def is_byzantine(self) -> bool:
        return self.hampers_consensus() or self.forge_served_blocks


class FaultInjectedEngine(ConsensusEngine):
    """Engine with scenario-controlled Byzantine behavior. Only a leader can
    equivocate or censor; honest paths are untouched when flags are off."""

    faults: NodeFaults = NodeFaults()

    def _filter_batch(self, batch: list[bytes]) -> list[bytes]:
        if self.faults.censor_marked:
            return [p for p in batch if CENSOR_MARK not in p]
        return batch

    def _broadcast_preprepare(self, proposal) -> None:
        if not self.faults.equivocate or len(self._current_batch) < 2:
            super()._broadcast_preprepare(proposal)
            return
        alt = self.app.assemble(proposal.metadata, list(reversed(self._current_batch)))
        if alt.digest == proposal.digest:
            super()._broadcast_preprepare(proposal)
            return
        others = [i for i in self.config.member_ids() if i != self.node_id]
        split = max(self.config.f, 1)
        minority, majority = others[:split], others[split:]
        view, seq = self.current_view, self.next_sequence
        self._emit("byzantine_equivocation", view=view, sequence=seq,
                   digests=[proposal.digest.hex(), alt.digest.hex()])
        for node in minority:
            self.transport.send(node, PrePrepare(proposal))
        # vote for the alternate as well so the majority can commit it
        psig = self.app.sign_state(prepare_attestation(view, seq, alt.digest))
        csig = self.app.sign_proposal(alt)
        for node in majority:
            self.transport.send(node, PrePrepare(alt))
            self.transport.send(node, Prepare(view, seq, alt.digest, psig))
            self.transport.send(node, Commit(view, seq, alt.digest, csig))


@dataclass
class PeerView:
    """How one node's delivery service looks to a syncing peer; adversarial
    nodes serve forged blocks, crashed nodes serve nothing."""

    node: "SimNode"

    @property
    def node_id(self) -> int:
        return self.node.node_id

    def height(self) -> int:
        if self.node.cluster.network.is_crashed(self.node.node_id):
            return 0
        return self.node.store.height

    def read_block(self, number: int) -> Block | None:
        if self.node.cluster.network.is_crashed(self.node.node_id):
            return None
        if number >= self.node.store.height:
            return None
        block = self.node.store.get(number)
        if self.node.faults.forge_served_blocks and number > 0:
            return self._forge(block)
        return block

    @staticmethod
    def _forge(block: Block) -> Block:
        # tamper a transaction but keep the header self-consistent, so only
        # the signature policy can catch it
        from .blocks import BlockHeader, data_hash

        payload = tuple(p[:-1] + bytes([p[-1] ^ 1]) for p in block.payload)
        header = BlockHeader(block.header.number, block.header.previous_hash,
                             data_hash(payload))
        return Block(header, payload, block.view, block.sequence, block.signatures)


class SimNode:
    def __init__(self, cluster: "SimCluster", node_id: int, keypair: keys.KeyPair,
                 consortium: ConsortiumConfig, faults: NodeFaults) -> None:
        self.cluster = cluster
        self.node_id = node_id
        self.keypair = keypair
        self.faults = faults
        self.events: list[dict] = []
        self.port = cluster.network.add_node(node_id)
        store_path = cluster.store_dir / f"node_{node_id}.blocks" if cluster.store_dir else None
        self.store = BlockStore(store_path)
        self.app = OrderingApp(node_id, keypair, consortium, self.store,
                               peers=lambda: self._peers())
        self.store.watch(self._on_block)
        self.wal = MemoryWal()
        self.engine = self._make_engine(consortium.configuration)
        cluster.network.attach_handler(node_id, self.engine.handle_message)

    def _make_engine(self, configuration: Configuration) -> FaultInjectedEngine:
        tip = self.store.tip()
        engine = FaultInjectedEngine(
            self.node_id,
            configuration,
            self.app,
            self.port,
            self.port,
            self.wal,
            initial_sequence=self.store.height,
            initial_last_digest=tip.proposal_digest() if tip else b"",
        )
        engine.faults = self.faults
        engine.on_event = self._record
        return engine

    def _peers(self) -> list[PeerView]:
        return [PeerView(n) for n in self.cluster.nodes.values() if n.node_id != self.node_id]

    def _record(self, kind: str, fields: dict) -> None:
        entry = {"t": round(self.port.now(), 9), "kind": kind}
        entry.update(fields)
        self.events.append(entry)

    def _on_block(self, block: Block) -> None:
        self.cluster.on_block(self.node_id, block)

    def submit_request(self, payload: bytes) -> bool:
        """The OSN submit path: filter first, then hand to the library."""
        if self.cluster.network.is_crashed(self.node_id):
            raise ConnectionError(f"node {self.node_id} is down")
        try:
            self.app.verify_request(payload)
        except VerifyError:
            return False
        return self.engine.submit_request(payload) is EnqueueResult.OK

    def restart(self) -> None:
        """Recover from 'disk': same store and WAL, fresh engine state."""
        self.app = OrderingApp(self.node_id, self.keypair,
                               self.app.consortium, self.store,
                               peers=lambda: self._peers())
        self.engine = self._make_engine(self.app.consortium.configuration)
        self.cluster.network.attach_handler(self.node_id, self.engine.handle_message)
        self.cluster.network.revive(self.node_id)
        self.engine.start()
        self.engine.trigger_sync()


class SimCluster:
    """All the moving parts of one simulated run."""

    def __init__(self, scenario: Scenario, seed: int | None = None,
                 store_dir: Path | None = None) -> None:
        scenario.validate()
        self.scenario = scenario
        self.seed = scenario.seed if seed is None else seed
        self.store_dir = store_dir
        if store_dir is not None:
            store_dir.mkdir(parents=True, exist_ok=True)

        total_nodes = scenario.n + scenario.standby
        latency, costs = latency_model(scenario, total_nodes)
        self.network = SimNetwork(seed=self.seed, latency=latency, costs=costs)
        self.rng = random.Random(self.seed ^ 0x5EED)

        self.node_keys = [keys.KeyPair.from_seed(b"node:%d:%d" % (self.seed, i))
                          for i in range(total_nodes)]
        self.client_keys = [keys.KeyPair.from_seed(b"client:%d:%d" % (self.seed, i))
                            for i in range(max(scenario.clients, 1))]

        consenters = [(i, self.node_keys[i].public) for i in range(scenario.n)]
        configuration = Configuration.build(
            consenters,
            request_forward_timeout=scenario.forward_timeout,
            request_complaint_timeout=scenario.complaint_timeout,
            leader_heartbeat_timeout=scenario.leader_heartbeat_timeout,
            heartbeat_interval=scenario.heartbeat_interval,
            batch_max_count=scenario.batch_max_count,
            batch_timeout=scenario.batch_timeout,
            sync_lag_threshold=scenario.sync_lag_threshold,
        )
        self.genesis = ConsortiumConfig(
            configuration, tuple(k.public for k in self.client_keys))

        self.faults = {i: NodeFaults() for i in range(total_nodes)}
        self._apply_fault_schedule()

        self.nodes: dict[int, SimNode] = {}
        for i in range(total_nodes):
            self.nodes[i] = SimNode(self, i, self.node_keys[i], self.genesis, self.faults[i])

        self.block_log: dict[int, list[tuple[float, int, str]]] = {i: [] for i in self.nodes}
        self.expected_digests: set[bytes] = set()
        self.forbidden_digests: set[bytes] = set()
        self.submissions: dict[bytes, float] = {}
        self.delivery_times: dict[bytes, float] = {}
        self._block_watchers: list = []

    # -- fault schedule -------------------------------------------------------

    def _apply_fault_schedule(self) -> None:
        for fault in self.scenario.faults:
            if fault.kind == "crash":
                self.faults[fault.node].crash_at = fault.at
            elif fault.kind == "restart":
                self.faults[fault.node].restart_at = fault.at
            elif fault.kind == "byzantine":
                if fault.policy == "equivocate":
                    self.faults[fault.node].equivocate = True
                elif fault.policy == "forge_served_blocks":
                    self.faults[fault.node].forge_served_blocks = True
                else:
                    raise ValueError(f"unknown byzantine policy {fault.policy!r}")
            elif fault.kind == "censor":
                self.faults[fault.node].censor_marked = True
            elif fault.kind == "partition":
                self.network.add_partition(Partition(
                    groups=tuple(frozenset(g) for g in fault.groups),
                    start=fault.start or 0.0,
                    end=fault.until if fault.until is not None else float("inf"),
                ))

    def correct_ids(self) -> list[int]:
        """Nodes whose consensus behavior is honest; a crashed-then-recovered
        node counts once it is back."""
        return [i for i, fl in self.faults.items() if not fl.hampers_consensus()]

    def alive_correct_ids(self) -> list[int]:
        return [i for i in self.correct_ids()
                if not self.network.is_crashed(i)]

    def member_ids(self) -> list[int]:
        return list(range(self.scenario.n))

    # -- lifecycle ---------------------------------------------------------------

    def start(self) -> None:
        for node in self.nodes.values():
            node.engine.start()
        for node_id, fault in self.faults.items():
            if fault.crash_at is not None:
                self.network.call_at(fault.crash_at,
                                     lambda nid=node_id: self.network.crash(nid))
            if fault.restart_at is not None:
                self.network.call_at(fault.restart_at,
                                     lambda nid=node_id: self.nodes[nid].restart())

    def on_block(self, node_id: int, block: Block) -> None:
        digest_hex = block.proposal_digest().hex()
        self.block_log[node_id].append((round(self.network.clock, 9),
                                        block.header.number, digest_hex))
        for watcher in self._block_watchers:
            watcher(node_id, block)

    def watch_blocks(self, fn) -> None:
        self._block_watchers.append(fn)

    def submit_to_all(self, payload: bytes, members_only: bool = True) -> int:
        targets = self.member_ids() if members_only else sorted(self.nodes)
        accepted = 0
        for node_id in targets:
            try:
                if self.nodes[node_id].submit_request(payload):
                    accepted += 1
            except ConnectionError:
                continue
        return accepted

    # -- final state helpers --------------------------------------------------------

    def chain_digests(self, node_id: int) -> list[str]:
        store = self.nodes[node_id].store
        return [store.get(i).proposal_digest().hex() for i in range(store.height)]

    def delivered_tx_digests(self, node_id: int) -> set[bytes]:
        store = self.nodes[node_id].store
        out: set[bytes] = set()
        for number in range(1, store.height):
            for tx in store.get(number).payload:
                out.add(request_digest(tx))
        return out


class ClosedLoopWorkload:
    """W workers each keep one transaction outstanding: a worker submits its
    next transaction when the observer node delivers its previous one."""

    def __init__(self, cluster: SimCluster, observer: int,
                 censor_tx_index: int | None = None) -> None:
        self.cluster = cluster
        self.scenario = cluster.scenario
        self.observer = observer
        self.txs: list[bytes] = []
        self.by_digest: dict[bytes, int] = {}
        client = cluster.client_keys[0]
        filler = b"\x00" * max(self.scenario.tx_size - 16, 0)
        for k in range(self.scenario.tx_count):
            body = k.to_bytes(8, "big") + filler
            if censor_tx_index is not None and k == censor_tx_index:
                body = CENSOR_MARK + body
            tx = Transaction.create(TxKind.ORDINARY, body, client)
            payload = tx.encode()
            self.txs.append(payload)
            self.by_digest[request_digest(payload)] = k
        self.next_tx = 0
        self.delivered: set[int] = set()
        cluster.watch_blocks(self._on_block)

    def start(self) -> None:
        workers = min(self.scenario.workers, len(self.txs))
        for w in range(workers):
            self._schedule_submit(self.next_tx, 0.001 + w * 0.0003)
            self.next_tx += 1

    def _schedule_submit(self, index: int, when: float) -> None:
        payload = self.txs[index]
        digest = request_digest(payload)
        self.cluster.expected_digests.add(digest)

        def do_submit() -> None:
            self.cluster.submissions.setdefault(digest, self.cluster.network.clock)
            self.cluster.submit_to_all(payload)

        self.cluster.network.call_at(when, do_submit)

    def _on_block(self, node_id: int, block: Block) -> None:
        if node_id != self.observer:
            return
        now = self.cluster.network.clock
        for tx in block.payload:
            digest = request_digest(tx)
            index = self.by_digest.get(digest)
            if index is None or index in self.delivered:
                continue
            self.delivered.add(index)
            self.cluster.delivery_times.setdefault(digest, now)
            if self.next_tx < len(self.txs):
                self._schedule_submit(self.next_tx,
                                      now + 0.0002 + self.scenario.think_time)
                self.next_tx += 1

    def all_submitted(self) -> bool:
        return self.next_tx >= len(self.txs)

    def done(self) -> bool:
        return len(self.delivered) >= len(self.txs)
