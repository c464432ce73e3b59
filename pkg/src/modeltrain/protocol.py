"""Shared domain types, canonical serialization, train archives, and the route state machine.

Everything here is pure data: values are immutable after construction and
safe to share between threads. Canonical serialization is the byte form
that signatures and digests are computed over, so it must be deterministic
across platforms and insertion orders.
"""

from __future__ import annotations

import base64
import json
import math
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Optional

ARCHIVE_MAGIC = b"PDMT"
ARCHIVE_VERSION = 1

RESEARCHER_PARTY = "researcher"


class ProtocolError(Exception):
    pass


class UnrepresentableValue(ProtocolError):
    """A real field holds NaN/Inf and cannot enter a signed region."""


class MalformedArchive(ProtocolError):
    pass


class VersionMismatch(ProtocolError):
    pass


class IllegalTransition(ProtocolError):
    pass


class InvariantViolation(ProtocolError):
    pass


# ---------------------------------------------------------------------------
# Canonical reals
#
# Signed regions carry no binary floats: reals are decimal strings with 12
# significant digits so the bytes are identical on every platform. Values
# that live in manifests/results are quantized through this form at
# construction time, which makes archive round-trips exact.

def canonical_real_str(x: float) -> str:
    if not math.isfinite(x):
        raise UnrepresentableValue(f"non-finite real: {x!r}")
    return format(float(x), ".12g")


def canonical_real(x: float) -> float:
    return float(canonical_real_str(x))


class RouteStatus(str, Enum):
    PENDING = "Pending"
    APPROVED = "Approved"
    IN_TRANSIT = "InTransit"
    AWAITING_APPROVAL = "AwaitingApproval"
    COMPLETED = "Completed"
    REJECTED = "Rejected"
    BLOCKED = "Blocked"


TERMINAL_STATUSES = frozenset({RouteStatus.COMPLETED, RouteStatus.REJECTED, RouteStatus.BLOCKED})

# Legal edges of the route state machine. Completed is only reachable via
# advance() reaching the end of the route.
_ROUTE_EDGES = {
    RouteStatus.PENDING: {RouteStatus.APPROVED, RouteStatus.REJECTED},
    RouteStatus.APPROVED: {RouteStatus.IN_TRANSIT},
    RouteStatus.IN_TRANSIT: {
        RouteStatus.AWAITING_APPROVAL,
        RouteStatus.COMPLETED,
        RouteStatus.REJECTED,
        RouteStatus.BLOCKED,
    },
    RouteStatus.AWAITING_APPROVAL: {
        RouteStatus.IN_TRANSIT,
        RouteStatus.REJECTED,
        RouteStatus.BLOCKED,
    },
}


class TaskKind(str, Enum):
    NB_SENTIMENT = "NbSentiment"
    SGD_LOGREG = "SgdLogReg"
    AND_PAIRWISE = "AndPairwise"


# Hyperparameter keys are exact per kind; the seed is mandatory everywhere
# (determinism contract).
REQUIRED_HYPERPARAMETERS = {
    TaskKind.NB_SENTIMENT: frozenset({"smoothing_alpha", "seed"}),
    TaskKind.SGD_LOGREG: frozenset({"learning_rate", "epochs", "seed"}),
    TaskKind.AND_PAIRWISE: frozenset({"learning_rate", "epochs", "seed"}),
}

_REAL_HYPERPARAMETERS = frozenset({"smoothing_alpha", "learning_rate"})

OUTPUT_MODEL_PARAMS = "ModelParams"
OUTPUT_AGGREGATE_METRICS = "AggregateMetrics"
ALLOWED_OUTPUT_KINDS = frozenset({OUTPUT_MODEL_PARAMS, OUTPUT_AGGREGATE_METRICS})


@dataclass(frozen=True)
class StationDescriptor:
    station_id: str
    public_key_id: str
    endpoint: str
    schema_id: str
    display_name: str

    def to_wire(self) -> dict:
        return {
            "station_id": self.station_id,
            "public_key_id": self.public_key_id,
            "endpoint": self.endpoint,
            "schema_id": self.schema_id,
            "display_name": self.display_name,
        }

    @classmethod
    def from_wire(cls, d: dict) -> "StationDescriptor":
        return cls(
            station_id=d["station_id"],
            public_key_id=d["public_key_id"],
            endpoint=d["endpoint"],
            schema_id=d["schema_id"],
            display_name=d["display_name"],
        )


@dataclass(frozen=True)
class Route:
    stations: tuple[str, ...]
    cursor: int = 0
    status: RouteStatus = RouteStatus.PENDING

    def __post_init__(self):
        if len(self.stations) < 1:
            raise InvariantViolation("route needs at least one station")
        if len(set(self.stations)) != len(self.stations):
            raise InvariantViolation("route stations must be unique")
        if not (0 <= self.cursor <= len(self.stations)):
            raise InvariantViolation("cursor out of range")
        if (self.status is RouteStatus.COMPLETED) != (self.cursor == len(self.stations)):
            raise InvariantViolation("status Completed iff cursor at end of route")

    def __len__(self) -> int:
        return len(self.stations)

    def transition(self, new_status: RouteStatus) -> "Route":
        """Move along an explicit edge of the status machine (not an advance)."""
        allowed = _ROUTE_EDGES.get(self.status, frozenset())
        if new_status not in allowed or new_status is RouteStatus.COMPLETED:
            raise IllegalTransition(f"{self.status.value} -> {new_status.value}")
        return replace(self, status=new_status)

    def advance(self) -> "Route":
        """Move the cursor one station forward; completes the route on the last hop."""
        if self.status is not RouteStatus.IN_TRANSIT:
            raise IllegalTransition(f"cannot advance in status {self.status.value}")
        if self.cursor >= len(self.stations):
            raise IllegalTransition("cursor already at end of route")
        cursor = self.cursor + 1
        status = RouteStatus.COMPLETED if cursor == len(self.stations) else self.status
        return replace(self, cursor=cursor, status=status)

    @property
    def current_station(self) -> Optional[str]:
        if self.cursor < len(self.stations):
            return self.stations[self.cursor]
        return None

    def to_wire(self) -> dict:
        return {
            "stations": list(self.stations),
            "cursor": self.cursor,
            "status": self.status.value,
        }

    @classmethod
    def from_wire(cls, d: dict) -> "Route":
        return cls(
            stations=tuple(d["stations"]),
            cursor=d["cursor"],
            status=RouteStatus(d["status"]),
        )


def advance_route(route: Route) -> Route:
    return route.advance()


@dataclass(frozen=True)
class ExitControlPolicy:
    min_records: int
    min_token_count: int
    allowed_outputs: frozenset[str]

    def __post_init__(self):
        if self.min_records < 1 or self.min_token_count < 1:
            raise InvariantViolation("exit policy minimums must be >= 1")
        if not frozenset(self.allowed_outputs) <= ALLOWED_OUTPUT_KINDS:
            raise InvariantViolation("unknown output kind in exit policy")
        object.__setattr__(self, "allowed_outputs", frozenset(self.allowed_outputs))

    def to_wire(self) -> dict:
        return {
            "min_records": self.min_records,
            "min_token_count": self.min_token_count,
            "allowed_outputs": sorted(self.allowed_outputs),
        }

    @classmethod
    def from_wire(cls, d: dict) -> "ExitControlPolicy":
        return cls(
            min_records=d["min_records"],
            min_token_count=d["min_token_count"],
            allowed_outputs=frozenset(d["allowed_outputs"]),
        )


@dataclass(frozen=True)
class AnalysisTask:
    task_id: str
    kind: TaskKind
    hyperparameters: dict[str, Any]
    required_schema_id: str
    exit_policy: ExitControlPolicy

    def __post_init__(self):
        required = REQUIRED_HYPERPARAMETERS[self.kind]
        got = frozenset(self.hyperparameters)
        if got != required:
            raise InvariantViolation(
                f"{self.kind.value} requires hyperparameters {sorted(required)}, got {sorted(got)}"
            )
        hp = dict(self.hyperparameters)
        for key in _REAL_HYPERPARAMETERS & got:
            if hp[key] <= 0:
                raise InvariantViolation(f"{key} must be positive")
            hp[key] = canonical_real(hp[key])
        if "epochs" in hp and (not isinstance(hp["epochs"], int) or hp["epochs"] < 1):
            raise InvariantViolation("epochs must be a positive integer")
        seed = hp["seed"]
        if not isinstance(seed, int) or not (0 <= seed < 2**64):
            raise InvariantViolation("seed must be a 64-bit unsigned integer")
        object.__setattr__(self, "hyperparameters", hp)

    def __eq__(self, other):
        return isinstance(other, AnalysisTask) and self.to_wire() == other.to_wire()

    def __hash__(self):
        return hash(canonical_serialize(self))

    def to_wire(self) -> dict:
        hp = {}
        for key, value in self.hyperparameters.items():
            hp[key] = canonical_real_str(value) if key in _REAL_HYPERPARAMETERS else value
        return {
            "task_id": self.task_id,
            "kind": self.kind.value,
            "hyperparameters": hp,
            "required_schema_id": self.required_schema_id,
            "exit_policy": self.exit_policy.to_wire(),
        }

    @classmethod
    def from_wire(cls, d: dict) -> "AnalysisTask":
        hp = dict(d["hyperparameters"])
        for key in _REAL_HYPERPARAMETERS & frozenset(hp):
            hp[key] = float(hp[key])
        return cls(
            task_id=d["task_id"],
            kind=TaskKind(d["kind"]),
            hyperparameters=hp,
            required_schema_id=d["required_schema_id"],
            exit_policy=ExitControlPolicy.from_wire(d["exit_policy"]),
        )


class Verdict(str, Enum):
    APPROVE = "Approve"
    REJECT = "Reject"


@dataclass(frozen=True)
class ApprovalRecord:
    party_id: str  # station_id or "researcher"
    key_id: str
    verdict: Verdict
    signature: bytes

    def to_wire(self) -> dict:
        return {
            "party_id": self.party_id,
            "key_id": self.key_id,
            "verdict": self.verdict.value,
            "signature": base64.b64encode(self.signature).decode("ascii"),
        }

    @classmethod
    def from_wire(cls, d: dict) -> "ApprovalRecord":
        return cls(
            party_id=d["party_id"],
            key_id=d["key_id"],
            verdict=Verdict(d["verdict"]),
            signature=base64.b64decode(d["signature"]),
        )


@dataclass(frozen=True)
class TrainManifest:
    train_id: str
    task: AnalysisTask
    route: Route
    researcher_key_id: str
    station_key_ids: dict[str, str]
    created_at: str  # ISO-8601 UTC, second resolution
    approvals: tuple[ApprovalRecord, ...] = ()
    manifest_signature: bytes = b""

    def __post_init__(self):
        missing = set(self.route.stations) - set(self.station_key_ids)
        if missing:
            raise InvariantViolation(f"station_key_ids missing route stations: {sorted(missing)}")
        object.__setattr__(self, "approvals", tuple(self.approvals))

    def __eq__(self, other):
        return isinstance(other, TrainManifest) and self.to_wire() == other.to_wire()

    def __hash__(self):
        return hash(canonical_serialize(self))

    def signing_body(self) -> bytes:
        """Bytes the Service Center signature covers (everything but the signature)."""
        wire = self.to_wire()
        wire.pop("manifest_signature")
        return _canonical_json_bytes(wire)

    def to_wire(self) -> dict:
        return {
            "train_id": self.train_id,
            "task": self.task.to_wire(),
            "route": self.route.to_wire(),
            "researcher_key_id": self.researcher_key_id,
            "station_key_ids": dict(self.station_key_ids),
            "created_at": self.created_at,
            "approvals": [a.to_wire() for a in self.approvals],
            "manifest_signature": base64.b64encode(self.manifest_signature).decode("ascii"),
        }

    @classmethod
    def from_wire(cls, d: dict) -> "TrainManifest":
        return cls(
            train_id=d["train_id"],
            task=AnalysisTask.from_wire(d["task"]),
            route=Route.from_wire(d["route"]),
            researcher_key_id=d["researcher_key_id"],
            station_key_ids=dict(d["station_key_ids"]),
            created_at=d["created_at"],
            approvals=tuple(ApprovalRecord.from_wire(a) for a in d["approvals"]),
            manifest_signature=base64.b64decode(d["manifest_signature"]),
        )


@dataclass(frozen=True)
class HopRecord:
    station_id: str
    record_count: int
    timestamp: str

    def to_wire(self) -> dict:
        return {
            "station_id": self.station_id,
            "record_count": self.record_count,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_wire(cls, d: dict) -> "HopRecord":
        return cls(d["station_id"], d["record_count"], d["timestamp"])


@dataclass(frozen=True)
class ModelState:
    task_kind: TaskKind
    schema_version: int
    payload: bytes
    records_aggregated: int = 0
    hops_completed: tuple[HopRecord, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "hops_completed", tuple(self.hops_completed))
        if self.records_aggregated != sum(h.record_count for h in self.hops_completed):
            raise InvariantViolation("records_aggregated must equal the sum over hops_completed")

    def with_hop(self, station_id: str, record_count: int, timestamp: str, payload: bytes) -> "ModelState":
        return replace(
            self,
            payload=payload,
            records_aggregated=self.records_aggregated + record_count,
            hops_completed=self.hops_completed + (HopRecord(station_id, record_count, timestamp),),
        )

    def to_wire(self) -> dict:
        return {
            "task_kind": self.task_kind.value,
            "schema_version": self.schema_version,
            "payload": base64.b64encode(self.payload).decode("ascii"),
            "records_aggregated": self.records_aggregated,
            "hops_completed": [h.to_wire() for h in self.hops_completed],
        }

    @classmethod
    def from_wire(cls, d: dict) -> "ModelState":
        return cls(
            task_kind=TaskKind(d["task_kind"]),
            schema_version=d["schema_version"],
            payload=base64.b64decode(d["payload"]),
            records_aggregated=d["records_aggregated"],
            hops_completed=tuple(HopRecord.from_wire(h) for h in d["hops_completed"]),
        )


@dataclass(frozen=True)
class ExitControlCheck:
    name: str
    passed: bool
    detail: str

    def to_wire(self) -> dict:
        return {"name": self.name, "passed": self.passed, "detail": self.detail}

    @classmethod
    def from_wire(cls, d: dict) -> "ExitControlCheck":
        return cls(d["name"], d["passed"], d["detail"])


@dataclass(frozen=True)
class ResultSummary:
    task_kind: TaskKind
    metrics: dict[str, float]
    total_records: int
    exit_control_report: tuple[ExitControlCheck, ...] = ()
    released_params: Optional[dict] = None

    def __post_init__(self):
        object.__setattr__(
            self, "metrics", {k: canonical_real(v) for k, v in self.metrics.items()}
        )
        object.__setattr__(self, "exit_control_report", tuple(self.exit_control_report))
        if any(not c.passed for c in self.exit_control_report) and self.released_params is not None:
            raise InvariantViolation("released_params must be absent when exit control failed")

    def __eq__(self, other):
        return isinstance(other, ResultSummary) and self.to_wire() == other.to_wire()

    def __hash__(self):
        return hash(canonical_serialize(self))

    @property
    def passed_exit_control(self) -> bool:
        return all(c.passed for c in self.exit_control_report)

    def to_wire(self) -> dict:
        return {
            "task_kind": self.task_kind.value,
            "metrics": {k: canonical_real_str(v) for k, v in sorted(self.metrics.items())},
            "total_records": self.total_records,
            "exit_control_report": [c.to_wire() for c in self.exit_control_report],
            "released_params": self.released_params,
        }

    @classmethod
    def from_wire(cls, d: dict) -> "ResultSummary":
        return cls(
            task_kind=TaskKind(d["task_kind"]),
            metrics={k: float(v) for k, v in d["metrics"].items()},
            total_records=d["total_records"],
            exit_control_report=tuple(
                ExitControlCheck.from_wire(c) for c in d["exit_control_report"]
            ),
            released_params=d["released_params"],
        )


@dataclass(frozen=True)
class TrainArchive:
    manifest: TrainManifest
    state: ModelState
    result_summary: Optional[ResultSummary] = None

    def __post_init__(self):
        if self.result_summary is not None and self.manifest.route.status is not RouteStatus.COMPLETED:
            raise InvariantViolation("result_summary present on a route that is not Completed")


# ---------------------------------------------------------------------------
# Canonical serialization

def _canonical_json_bytes(wire: Any) -> bytes:
    # sort_keys + tight separators + pure-ASCII output: equal wire values
    # always give identical bytes regardless of dict insertion order.
    return json.dumps(wire, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("ascii")


def canonical_serialize(value: Any) -> bytes:
    """Deterministic byte form of any protocol value, used for signing and digests."""
    if not hasattr(value, "to_wire"):
        raise TypeError(f"not a protocol value: {type(value).__name__}")
    return _canonical_json_bytes(value.to_wire())


# ---------------------------------------------------------------------------
# Train archive binary format
#
# magic "PDMT" | version u16 BE | manifest len u32 BE + bytes
# | state len u32 BE + bytes | result len u32 BE (0 if absent) + bytes

def encode_train_archive(archive: TrainArchive) -> bytes:
    parts = [ARCHIVE_MAGIC, struct.pack(">H", ARCHIVE_VERSION)]
    for section in (archive.manifest, archive.state):
        body = canonical_serialize(section)
        parts.append(struct.pack(">I", len(body)))
        parts.append(body)
    if archive.result_summary is None:
        parts.append(struct.pack(">I", 0))
    else:
        body = canonical_serialize(archive.result_summary)
        parts.append(struct.pack(">I", len(body)))
        parts.append(body)
    return b"".join(parts)


def decode_train_archive(data: bytes) -> TrainArchive:
    if len(data) < 6 or data[:4] != ARCHIVE_MAGIC:
        raise MalformedArchive("bad magic")
    (version,) = struct.unpack(">H", data[4:6])
    if version > ARCHIVE_VERSION:
        raise VersionMismatch(f"archive version {version} newer than supported {ARCHIVE_VERSION}")
    offset = 6
    sections = []
    for _ in range(3):
        if offset + 4 > len(data):
            raise MalformedArchive("truncated section header")
        (length,) = struct.unpack(">I", data[offset : offset + 4])
        offset += 4
        if offset + length > len(data):
            raise MalformedArchive("truncated section body")
        sections.append(data[offset : offset + length])
        offset += length
    if offset != len(data):
        raise MalformedArchive("trailing bytes after final section")
    try:
        manifest = TrainManifest.from_wire(json.loads(sections[0]))
        state = ModelState.from_wire(json.loads(sections[1]))
        result = ResultSummary.from_wire(json.loads(sections[2])) if sections[2] else None
    except (KeyError, ValueError, TypeError) as exc:
        raise MalformedArchive(f"undecodable section: {exc}") from exc
    return TrainArchive(manifest=manifest, state=state, result_summary=result)
