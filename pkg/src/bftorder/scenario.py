"""Declarative simulation scenarios and the shipped latency profiles."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

from .simnet import LatencyModel, ProcessingCosts
from .types import compute_quorum


class ScenarioError(ValueError):
    pass


@dataclass
class Fault:
    kind: str                       # crash | partition | byzantine | censor
    node: int | None = None
    at: float | None = None         # crash instant
    groups: list[list[int]] | None = None
    start: float | None = None      # partition window
    until: float | None = None
    policy: str | None = None       # byzantine: equivocate
    tx_index: int | None = None     # censor: which submitted tx is withheld


@dataclass
class ConfigChange:
    at: float
    add_standby: int = 0
    remove_client: int | None = None


@dataclass
class Scenario:
    name: str = "scenario"
    n: int = 4
    standby: int = 0
    clients: int = 2
    latency: str = "lan"            # lan | wan | explicit matrix via latency_matrix_ms
    latency_matrix_ms: list[list[float]] | None = None
    jitter: float | None = None
    batch_max_count: int = 100
    batch_timeout: float = 0.25
    tx_size: int = 256
    tx_count: int = 60
    workers: int = 30
    think_time: float = 0.0
    seed: int = 0
    duration: float = 300.0
    forward_timeout: float = 2.0
    complaint_timeout: float = 8.0
    heartbeat_interval: float = 1.0
    leader_heartbeat_timeout: float = 5.0
    sync_lag_threshold: int = 2
    faults: list[Fault] = field(default_factory=list)
    config_change: ConfigChange | None = None
    assert_liveness: bool = True

    def validate(self) -> None:
        f, _q = compute_quorum(self.n)
        if self.assert_liveness:
            # forge_served_blocks lies only when serving sync pulls, so it
            # does not count against the consensus fault budget
            hampered = set()
            for fl in self.faults:
                if fl.node is None:
                    continue
                if fl.kind == "crash" or fl.kind == "censor":
                    hampered.add(fl.node)
                elif fl.kind == "byzantine" and fl.policy != "forge_served_blocks":
                    hampered.add(fl.node)
            if len(hampered) > f:
                raise ScenarioError(
                    f"{len(hampered)} crash/byzantine nodes exceed f={f} for a liveness run")
        if self.tx_count < 1 or self.workers < 1:
            raise ScenarioError("need at least one transaction and one worker")
        for fl in self.faults:
            if fl.kind not in ("crash", "restart", "partition", "byzantine", "censor"):
                raise ScenarioError(f"unknown fault kind {fl.kind!r}")

    def with_updates(self, **changes) -> "Scenario":
        data = asdict(self)
        data.update(changes)
        return Scenario.from_dict(data)

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        data = dict(data)
        faults = [Fault(**f) if not isinstance(f, Fault) else f
                  for f in data.pop("faults", [])]
        change = data.pop("config_change", None)
        if isinstance(change, dict):
            change = ConfigChange(**change)
        known = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        unknown = set(data) - known
        if unknown:
            raise ScenarioError(f"unknown scenario fields: {sorted(unknown)}")
        scenario = cls(**data, faults=faults, config_change=change)
        scenario.validate()
        return scenario

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        text = Path(path).read_text()
        return cls.from_dict(json.loads(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")


def _load_profile(name: str) -> dict:
    with resources.files("bftorder.profiles").joinpath(f"{name}.json").open() as fh:
        return json.load(fh)


def latency_model(scenario: Scenario, nodes: int) -> tuple[LatencyModel, ProcessingCosts]:
    """Build the latency and processing model for ``nodes`` simulated nodes."""
    if scenario.latency_matrix_ms is not None:
        matrix = scenario.latency_matrix_ms
        profile = {"jitter": scenario.jitter or 0.0, "processing": {}}
    elif scenario.latency in ("lan", "wan"):
        profile = _load_profile(scenario.latency)
        matrix = profile.get("matrix_ms")
    else:
        raise ScenarioError(f"unknown latency profile {scenario.latency!r}")

    proc = profile.get("processing", {})
    costs = ProcessingCosts(
        per_message=proc.get("per_message_us", 0.0) / 1e6,
        per_tx=proc.get("per_tx_us", 0.0) / 1e6,
        per_signature=proc.get("per_signature_us", 0.0) / 1e6,
    )
    jitter = scenario.jitter if scenario.jitter is not None else profile.get("jitter", 0.0)

    if matrix is None:  # lan: uniform
        base = profile["uniform_ms"] / 1e3
        return LatencyModel.uniform(nodes, base, jitter), costs

    size = len(matrix)
    rows = []
    for i in range(nodes):
        row = []
        for j in range(nodes):
            # wrap around the profile for clusters larger than the site list
            row.append(matrix[i % size][j % size] / 1e3 if i != j else 0.0)
        rows.append(tuple(row))
    return LatencyModel(matrix=tuple(rows), jitter=jitter), costs
