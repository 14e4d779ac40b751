"""Scenario runner: builds a simulated cluster, drives it to completion,
collects metrics, writes traces, and evaluates the invariant checks."""

from __future__ import annotations

import json
import statistics
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from .blocks import ConsortiumConfig, Transaction, TxKind
from .invariants import RunTrace, check_invariants, detected_equivocations
from .scenario import ConfigChange, Scenario
from .sim import ClosedLoopWorkload, SimCluster
from .types import Configuration, request_digest


@dataclass
class RunReport:
    scenario: str
    seed: int
    n: int
    batch_max_count: int
    submitted_tx: int
    delivered_tx: int
    throughput_tps: float
    latency_mean_ms: float
    latency_p50_ms: float
    latency_p95_ms: float
    view_changes: int
    sim_duration_s: float
    messages_sent: dict[str, int] = field(default_factory=dict)
    frontiers: dict[int, int] = field(default_factory=dict)
    equivocations_detected: int = 0
    findings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.findings

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "n": self.n,
            "batch_max_count": self.batch_max_count,
            "submitted_tx": self.submitted_tx,
            "delivered_tx": self.delivered_tx,
            "throughput_tps": round(self.throughput_tps, 3),
            "latency_ms": {
                "mean": round(self.latency_mean_ms, 3),
                "p50": round(self.latency_p50_ms, 3),
                "p95": round(self.latency_p95_ms, 3),
            },
            "view_changes": self.view_changes,
            "sim_duration_s": round(self.sim_duration_s, 6),
            "messages_sent": dict(sorted(self.messages_sent.items())),
            "frontiers": {str(k): v for k, v in sorted(self.frontiers.items())},
            "equivocations_detected": self.equivocations_detected,
            "invariants": "pass" if self.ok else self.findings,
        }


def _percentile(values: list[float], fraction: float) -> float:
    if not values:
        return 0.0
    ordered = sorted(values)
    index = min(int(len(ordered) * fraction), len(ordered) - 1)
    return ordered[index]


def _schedule_config_change(cluster: SimCluster, change: ConfigChange) -> None:
    scenario = cluster.scenario
    if scenario.n + change.add_standby > scenario.n + scenario.standby:
        raise ValueError("config change adds more consenters than standby nodes exist")
    if change.remove_client == 0:
        raise ValueError("client 0 is the workload/admin client and cannot be removed")

    def fire() -> None:
        old = cluster.nodes[0].app.consortium.configuration
        new_n = scenario.n + change.add_standby
        consenters = [(i, cluster.node_keys[i].public) for i in range(new_n)]
        new_config = Configuration.build(
            consenters,
            request_forward_timeout=old.request_forward_timeout,
            request_complaint_timeout=old.request_complaint_timeout,
            leader_heartbeat_timeout=old.leader_heartbeat_timeout,
            heartbeat_interval=old.heartbeat_interval,
            batch_max_count=old.batch_max_count,
            batch_timeout=old.batch_timeout,
            sync_lag_threshold=old.sync_lag_threshold,
        )
        clients = [k.public for i, k in enumerate(cluster.client_keys)
                   if i != change.remove_client]
        consortium = ConsortiumConfig(new_config, tuple(clients))
        admin = cluster.client_keys[0]
        if change.remove_client is not None:
            removed = cluster.client_keys[change.remove_client]
            for j in range(3):
                evict_tx = Transaction.create(
                    TxKind.ORDINARY, b"stranded:%d" % j, removed).encode()
                cluster.forbidden_digests.add(request_digest(evict_tx))
                cluster.submit_to_all(evict_tx)
        config_tx = Transaction.create(TxKind.CONFIG, consortium.encode(), admin).encode()
        cluster.expected_digests.add(request_digest(config_tx))
        cluster.submissions.setdefault(request_digest(config_tx), cluster.network.clock)
        cluster.submit_to_all(config_tx)

    cluster.network.call_at(change.at, fire)


def run_scenario(scenario: Scenario, seed: int | None = None,
                 out_dir: str | Path | None = None) -> RunReport:
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        return _run(scenario, seed, out_dir)
    with tempfile.TemporaryDirectory(prefix="bftsim-") as tmp:
        return _run(scenario, seed, Path(tmp))


def _run(scenario: Scenario, seed: int | None, out_dir: Path) -> RunReport:
    cluster = SimCluster(scenario, seed=seed, store_dir=out_dir / "stores")
    censor_index = None
    for fault in scenario.faults:
        if fault.kind == "censor":
            censor_index = fault.tx_index if fault.tx_index is not None else 0
    observer = max(i for i in cluster.correct_ids()
                   if i in cluster.member_ids() and cluster.faults[i].crash_at is None)
    workload = ClosedLoopWorkload(cluster, observer, censor_tx_index=censor_index)
    if scenario.config_change is not None:
        _schedule_config_change(cluster, scenario.config_change)

    cluster.start()
    workload.start()

    def converged() -> bool:
        if not workload.done():
            return False
        alive = cluster.alive_correct_ids()
        frontier = max(cluster.nodes[i].store.height for i in alive)
        return all(cluster.nodes[i].store.height == frontier for i in alive)

    network = cluster.network
    network.run(scenario.duration, step=0.25, stop=converged)
    # small grace window so trailing commits land everywhere
    network.run(min(2.0, scenario.duration), step=0.25)

    return _finish(scenario, cluster, workload, out_dir)


def _finish(scenario: Scenario, cluster: SimCluster,
            workload: ClosedLoopWorkload, out_dir: Path) -> RunReport:
    for node in cluster.nodes.values():
        node.engine.stop()
    trace = _write_trace(scenario, cluster, out_dir)
    findings = check_invariants(trace)
    equivocations = detected_equivocations(trace)

    latencies = []
    for digest, submitted in cluster.submissions.items():
        delivered = cluster.delivery_times.get(digest)
        if delivered is not None:
            latencies.append((delivered - submitted) * 1e3)
    delivered_count = len(workload.delivered)
    if cluster.delivery_times and cluster.submissions:
        span = max(cluster.delivery_times.values()) - min(cluster.submissions.values())
    else:
        span = 0.0
    throughput = delivered_count / span if span > 0 else 0.0

    view_changes = 0
    for node_id in cluster.alive_correct_ids():
        view_changes = max(view_changes, cluster.nodes[node_id].engine.current_view)

    report = RunReport(
        scenario=scenario.name,
        seed=cluster.seed,
        n=scenario.n,
        batch_max_count=scenario.batch_max_count,
        submitted_tx=len(cluster.submissions),
        delivered_tx=delivered_count,
        throughput_tps=throughput,
        latency_mean_ms=statistics.fmean(latencies) if latencies else 0.0,
        latency_p50_ms=_percentile(latencies, 0.50),
        latency_p95_ms=_percentile(latencies, 0.95),
        view_changes=view_changes,
        sim_duration_s=cluster.network.clock,
        messages_sent=dict(cluster.network.sent_counts),
        frontiers={i: n.store.height for i, n in sorted(cluster.nodes.items())},
        equivocations_detected=len(equivocations),
        findings=[str(f) for f in findings],
    )
    (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    return report


def _write_trace(scenario: Scenario, cluster: SimCluster, out_dir: Path) -> RunTrace:
    stores = {}
    for node_id, node in cluster.nodes.items():
        stores[str(node_id)] = f"stores/node_{node_id}.blocks"
    meta = {
        "scenario": scenario.to_dict(),
        "seed": cluster.seed,
        "n": scenario.n,
        "correct_nodes": cluster.correct_ids(),
        "alive_nodes": cluster.alive_correct_ids(),
        "byzantine_nodes": [i for i, fl in cluster.faults.items() if fl.is_byzantine()],
        "assert_liveness": scenario.assert_liveness,
        "expected_digests": sorted(d.hex() for d in cluster.expected_digests),
        "forbidden_digests": sorted(d.hex() for d in cluster.forbidden_digests),
        "stores": stores,
        "initial_sequence": 1,
    }
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    node_events = {}
    store_paths = {}
    for node_id, node in cluster.nodes.items():
        (out_dir / f"node_{node_id}.json").write_text(json.dumps(node.events))
        node_events[node_id] = node.events
        store_paths[node_id] = out_dir / stores[str(node_id)]
    return RunTrace(meta=meta, node_events=node_events, store_paths=store_paths)


def sweep(scenario: Scenario, batch_sizes: list[int],
          out_dir: str | Path | None = None) -> list[RunReport]:
    """Repeat the run across block sizes (the batch-size/throughput trend)."""
    reports = []
    for batch in batch_sizes:
        workers = max(scenario.workers, 2 * batch)
        variant = scenario.with_updates(
            name=f"{scenario.name}-b{batch}", batch_max_count=batch, workers=workers)
        sub_dir = Path(out_dir) / f"batch_{batch}" if out_dir is not None else None
        reports.append(run_scenario(variant, out_dir=sub_dir))
    return reports


def render_table(reports: list[RunReport]) -> str:
    header = (f"{'scenario':<24} {'seed':>5} {'n':>3} {'batch':>6} {'tx':>7} "
              f"{'tps':>10} {'mean ms':>9} {'p95 ms':>9} {'views':>6} {'ok':>4}")
    lines = [header, "-" * len(header)]
    for r in reports:
        lines.append(
            f"{r.scenario:<24.24} {r.seed:>5} {r.n:>3} {r.batch_max_count:>6} "
            f"{r.delivered_tx:>7} {r.throughput_tps:>10.1f} {r.latency_mean_ms:>9.1f} "
            f"{r.latency_p95_ms:>9.1f} {r.view_changes:>6} {'yes' if r.ok else 'NO':>4}")
    return "\n".join(lines)
