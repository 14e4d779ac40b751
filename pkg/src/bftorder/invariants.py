"""Mechanical invariant checks over run traces.

Works from what a run leaves behind: per-node event logs plus the block
files. Every cryptographic check is recomputed here from the stored bytes
(starting at the genesis configuration embedded in block 0), independently
of whatever the engines believed at runtime.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .blocks import Block, ConsortiumConfig, TxKind, validate_block
from .contract import VerifyError
from .ordering import BlockStore
from .types import request_digest


@dataclass(frozen=True)
class Finding:
    name: str
    detail: str
    nodes: tuple[int, ...] = ()
    sequence: int | None = None

    def __str__(self) -> str:
        where = f" nodes={list(self.nodes)}" if self.nodes else ""
        at = f" sequence={self.sequence}" if self.sequence is not None else ""
        return f"[{self.name}]{at}{where} {self.detail}"


@dataclass
class RunTrace:
    meta: dict
    node_events: dict[int, list[dict]]
    store_paths: dict[int, Path]
    _chains: dict[int, list[Block]] = field(default_factory=dict, repr=False)

    def chain(self, node_id: int) -> list[Block]:
        if node_id not in self._chains:
            store = BlockStore(self.store_paths[node_id])
            self._chains[node_id] = list(store.read_range(0))
        return self._chains[node_id]

    def store_bytes(self, node_id: int) -> bytes:
        return Path(self.store_paths[node_id]).read_bytes()

    @property
    def correct_nodes(self) -> list[int]:
        return sorted(self.meta["correct_nodes"])

    @property
    def alive_nodes(self) -> list[int]:
        return sorted(self.meta.get("alive_nodes", self.meta["correct_nodes"]))


def load_trace(directory: str | Path) -> RunTrace:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    node_events: dict[int, list[dict]] = {}
    store_paths: dict[int, Path] = {}
    for node_id_str, rel in meta["stores"].items():
        node_id = int(node_id_str)
        store_paths[node_id] = directory / rel
        events_file = directory / f"node_{node_id}.json"
        node_events[node_id] = json.loads(events_file.read_text()) if events_file.exists() else []
    return RunTrace(meta=meta, node_events=node_events, store_paths=store_paths)


def check_invariants(trace: RunTrace) -> list[Finding]:
    findings: list[Finding] = []
    findings += _check_agreement(trace)
    findings += _check_chains(trace)
    findings += _check_ledger_equality(trace)
    findings += _check_no_pipelining(trace)
    findings += _check_totality(trace)
    findings += _check_correct_node_equivocation(trace)
    return findings


def detected_equivocations(trace: RunTrace) -> list[dict]:
    """Cross-node view: distinct proposal digests observed for one
    (view, sequence, sender) triple."""
    seen: dict[tuple[int, int, int], set[str]] = {}
    for node_id, events in trace.node_events.items():
        for event in events:
            if event["kind"] not in ("preprepare_recv", "byzantine_equivocation"):
                continue
            if event["kind"] == "byzantine_equivocation":
                key = (node_id, event["view"], event["sequence"])
                seen.setdefault(key, set()).update(event["digests"])
                continue
            key = (event["sender"], event["view"], event["sequence"])
            seen.setdefault(key, set()).add(event["digest"])
    return [
        {"sender": sender, "view": view, "sequence": seq, "digests": sorted(digests)}
        for (sender, view, seq), digests in sorted(seen.items())
        if len(digests) > 1
    ]


def _check_agreement(trace: RunTrace) -> list[Finding]:
    """Correct nodes' decision logs are prefix-consistent and identical at
    equal length."""
    findings = []
    chains = {i: trace.chain(i) for i in trace.correct_nodes}
    ids = sorted(chains)
    for a_pos, a in enumerate(ids):
        for b in ids[a_pos + 1:]:
            for number in range(min(len(chains[a]), len(chains[b]))):
                da = chains[a][number].proposal_digest()
                db = chains[b][number].proposal_digest()
                if da != db:
                    findings.append(Finding(
                        "agreement-violation",
                        f"block {number} differs: {da.hex()[:16]} vs {db.hex()[:16]}",
                        nodes=(a, b), sequence=number))
                    break
    return findings


def _check_chains(trace: RunTrace) -> list[Finding]:
    """Gapless numbering, hash links, and a valid q-of-n certificate on
    every block under the consenter set active at that height."""
    findings = []
    for node_id in trace.correct_nodes:
        chain = trace.chain(node_id)
        if not chain:
            findings.append(Finding("empty-chain", "no genesis block", nodes=(node_id,)))
            continue
        policy = _genesis_consortium(chain[0])
        if policy is None:
            findings.append(Finding("bad-genesis", "block 0 carries no configuration",
                                    nodes=(node_id,)))
            continue
        previous = None
        for block in chain:
            try:
                validate_block(block, policy, previous=previous)
            except VerifyError as exc:
                findings.append(Finding(
                    "certificate-or-chain-violation",
                    f"block {block.header.number}: {exc}",
                    nodes=(node_id,), sequence=block.header.number))
                break
            previous = block.header
            updated = _config_in(block)
            if updated is not None:
                policy = updated
    return findings


def _check_ledger_equality(trace: RunTrace) -> list[Finding]:
    """Alive correct nodes converge to byte-identical block files."""
    alive = trace.alive_nodes
    if len(alive) < 2:
        return []
    reference = trace.store_bytes(alive[0])
    findings = []
    for node_id in alive[1:]:
        if trace.store_bytes(node_id) != reference:
            findings.append(Finding(
                "ledger-divergence",
                f"block file differs from node {alive[0]}'s",
                nodes=(alive[0], node_id)))
    return findings


def _check_no_pipelining(trace: RunTrace) -> list[Finding]:
    """No pre-prepare for sequence s+1 before the delivery record for s at
    the proposing node."""
    findings = []
    for node_id, events in trace.node_events.items():
        if node_id not in trace.correct_nodes:
            continue
        frontier = trace.meta.get("initial_sequence", 1) - 1
        for event in events:
            kind = event["kind"]
            if kind == "decide":
                frontier = max(frontier, event["sequence"])
            elif kind == "synced":
                frontier = max(frontier, event["sequence"])
            elif kind == "preprepare_sent":
                if event["sequence"] != frontier + 1:
                    findings.append(Finding(
                        "pipelining",
                        f"pre-prepare for {event['sequence']} with frontier {frontier}",
                        nodes=(node_id,), sequence=event["sequence"]))
    return findings


def _check_totality(trace: RunTrace) -> list[Finding]:
    if not trace.meta.get("assert_liveness", False):
        return []
    expected = {bytes.fromhex(d) for d in trace.meta.get("expected_digests", [])}
    forbidden = {bytes.fromhex(d) for d in trace.meta.get("forbidden_digests", [])}
    findings = []
    for node_id in trace.alive_nodes:
        delivered: set[bytes] = set()
        for block in trace.chain(node_id)[1:]:
            for tx in block.payload:
                delivered.add(request_digest(tx))
        missing = expected - delivered
        if missing:
            findings.append(Finding(
                "undelivered-requests",
                f"{len(missing)} submitted requests missing", nodes=(node_id,)))
        leaked = forbidden & delivered
        if leaked:
            findings.append(Finding(
                "evicted-request-delivered",
                f"{len(leaked)} evicted requests were delivered", nodes=(node_id,)))
    return findings


def _check_correct_node_equivocation(trace: RunTrace) -> list[Finding]:
    byzantine = set(trace.meta.get("byzantine_nodes", []))
    findings = []
    for case in detected_equivocations(trace):
        if case["sender"] not in byzantine:
            findings.append(Finding(
                "correct-node-equivocated",
                f"view {case['view']}: digests {case['digests']}",
                nodes=(case["sender"],), sequence=case["sequence"]))
    return findings


def _genesis_consortium(genesis: Block) -> ConsortiumConfig | None:
    return _config_in(genesis)


def _config_in(block: Block) -> ConsortiumConfig | None:
    for tx in block.transactions():
        if tx.kind is TxKind.CONFIG:
            return ConsortiumConfig.decode(tx.body)
    return None
