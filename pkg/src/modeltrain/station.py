"""Data Station agent: pull the train, decrypt and verify, run the analysis on
local data in a restricted executor, hold for admin approval, apply exit
control on the final hop, re-seal for the next hop, and push.

Raw dataset rows never leave this module: pushed payloads contain only
model state and result summaries, admin views contain only aggregates and
digests, and log lines carry counts, ids, and digests.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import socket
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import httpx
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from . import center as center_mod
from .client import CenterClient
from .envelope import EncryptedEnvelope, KeyPair, PublicKey, open_envelope, seal
from .protocol import (
    OUTPUT_AGGREGATE_METRICS,
    OUTPUT_MODEL_PARAMS,
    ExitControlCheck,
    ExitControlPolicy,
    ModelState,
    ResultSummary,
    Route,
    RouteStatus,
    TrainArchive,
    TrainManifest,
    Verdict,
    canonical_serialize,
    decode_train_archive,
    encode_train_archive,
)
from .tasks import (
    BUILTIN_SCHEMAS,
    Schema,
    apply_update,
    evaluate,
    model_params_view,
)

log = logging.getLogger(__name__)


class StationError(Exception):
    pass


class FatalConfig(StationError):
    pass


class SchemaMismatch(StationError):
    pass


class TaskFailure(StationError):
    pass


class UnauthorizedApprover(StationError):
    pass


class DecisionConflict(StationError):
    pass


@dataclass
class StationConfig:
    station_id: str
    station_key: KeyPair
    admin_key: KeyPair
    center_url: str
    dataset_path: str
    schema_id: str
    poll_interval: float = 2.0
    auto_approve: bool = False
    display_name: str = ""
    endpoint: str = ""
    admin_listen: str = "127.0.0.1:0"

    def __post_init__(self):
        if self.poll_interval < 1e-3:
            raise FatalConfig("poll interval must be positive")

    @classmethod
    def from_file(cls, path: str | Path) -> "StationConfig":
        cfg = json.loads(Path(path).read_text())
        base = Path(path).parent
        return cls(
            station_id=cfg["station_id"],
            station_key=KeyPair.load(base / cfg["station_key_file"]),
            admin_key=KeyPair.load(base / cfg["admin_key_file"]),
            center_url=cfg["center_url"],
            dataset_path=str(base / cfg["dataset_path"]),
            schema_id=cfg["schema_id"],
            poll_interval=cfg.get("poll_interval", 2.0),
            auto_approve=cfg.get("auto_approve", False),
            display_name=cfg.get("display_name", cfg["station_id"]),
            endpoint=cfg.get("endpoint", ""),
            admin_listen=cfg.get("admin_listen", "127.0.0.1:0"),
        )


@dataclass(frozen=True)
class LocalDataset:
    schema_id: str
    rows: tuple[dict, ...]

    @property
    def row_count(self) -> int:
        return len(self.rows)


def load_dataset(path: str | Path, schema: Schema) -> LocalDataset:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    schema.validate_rows(rows)
    return LocalDataset(schema_id=schema.schema_id, rows=tuple(rows))


_executor_state = threading.local()
_socket_init = socket.socket.__init__
_create_connection = socket.create_connection


def _guarded_socket_init(self, *args, **kwargs):
    if getattr(_executor_state, "restricted", False):
        raise TaskFailure("network access is not permitted inside the task executor")
    return _socket_init(self, *args, **kwargs)


def _guarded_create_connection(*args, **kwargs):
    if getattr(_executor_state, "restricted", False):
        raise TaskFailure("network access is not permitted inside the task executor")
    return _create_connection(*args, **kwargs)


# Installed once: pass-through unless the current thread is inside
# restricted_executor, so concurrent agents keep their transport.
socket.socket.__init__ = _guarded_socket_init
socket.create_connection = _guarded_create_connection


@contextmanager
def restricted_executor():
    """No network while a task runs: socket creation raises for the executing
    thread inside the block."""
    _executor_state.restricted = True
    try:
        yield
    finally:
        _executor_state.restricted = False


def execute_task(task, state: ModelState, dataset: LocalDataset) -> bytes:
    """Run one incremental update inside the restricted executor; returns the
    new opaque payload. Deterministic given (state, dataset, hyperparameters)."""
    if state.task_kind is not task.kind:
        raise TaskFailure(f"state kind {state.task_kind.value} != task kind {task.kind.value}")
    if task.required_schema_id != dataset.schema_id:
        raise SchemaMismatch(
            f"task needs schema {task.required_schema_id}, dataset is {dataset.schema_id}"
        )
    try:
        with restricted_executor():
            return apply_update(task, state.payload, dataset.rows)
    except SchemaMismatch:
        raise
    except Exception as exc:
        # No row content in diagnostics.
        raise TaskFailure(f"task update failed: {type(exc).__name__}") from exc


def exit_control_check(summary: ResultSummary, policy: ExitControlPolicy) -> ResultSummary:
    """Apply the release policy: record floor, token-count pruning, allowed
    output categories. Returns the summary with the report attached and the
    released parameters pruned, or withheld entirely on any violation."""
    checks: list[ExitControlCheck] = []

    ok = summary.total_records >= policy.min_records
    checks.append(
        ExitControlCheck(
            "min_records",
            ok,
            f"total_records={summary.total_records}, floor={policy.min_records}",
        )
    )

    released = summary.released_params
    if released is not None and "token_counts" in released:
        token_counts = {c: dict(m) for c, m in released["token_counts"].items()}
        totals: dict[str, int] = {}
        for counts in token_counts.values():
            for token, n in counts.items():
                totals[token] = totals.get(token, 0) + n
        pruned = {t for t, n in totals.items() if n < policy.min_token_count}
        for counts in token_counts.values():
            for t in pruned:
                counts.pop(t, None)
        released = {**released, "token_counts": token_counts}
        remaining = {
            t
            for counts in token_counts.values()
            for t in counts
        }
        floor_ok = all(
            sum(counts.get(t, 0) for counts in token_counts.values()) >= policy.min_token_count
            for t in remaining
        )
        checks.append(
            ExitControlCheck(
                "min_token_count",
                floor_ok,
                f"pruned {len(pruned)} tokens below count floor {policy.min_token_count}",
            )
        )
    else:
        checks.append(
            ExitControlCheck("min_token_count", True, "no token-level parameters released")
        )

    categories = set()
    if released is not None:
        categories.add(OUTPUT_MODEL_PARAMS)
    if summary.metrics:
        categories.add(OUTPUT_AGGREGATE_METRICS)
    disallowed = sorted(categories - policy.allowed_outputs)
    checks.append(
        ExitControlCheck(
            "allowed_outputs",
            not disallowed,
            f"disallowed categories: {disallowed}" if disallowed else "all categories permitted",
        )
    )

    all_ok = all(c.passed for c in checks)
    return ResultSummary(
        task_kind=summary.task_kind,
        metrics=summary.metrics,
        total_records=summary.total_records,
        exit_control_report=tuple(checks),
        released_params=released if all_ok else None,
    )


@dataclass
class PendingApproval:
    train_id: str
    task_kind: str
    record_count: int
    pre_metric: dict
    post_metric: dict
    state_digest_in: str
    state_digest_out: str
    created_at: str
    decision: Optional[dict] = None

    def view(self) -> dict:
        return {
            "train_id": self.train_id,
            "task_kind": self.task_kind,
            "record_count": self.record_count,
            "pre_metric": self.pre_metric,
            "post_metric": self.post_metric,
            "state_digest_in": self.state_digest_in,
            "state_digest_out": self.state_digest_out,
            "created_at": self.created_at,
            "decided": self.decision is not None,
        }


class StationAgent:
    def __init__(self, config: StationConfig, http=None):
        self.config = config
        schema = BUILTIN_SCHEMAS.get(config.schema_id)
        if schema is None:
            raise FatalConfig(f"unknown schema {config.schema_id}")
        try:
            self.dataset = load_dataset(config.dataset_path, schema)
        except Exception as exc:
            raise FatalConfig(f"dataset failed validation: {type(exc).__name__}: {exc}") from exc
        self.client = CenterClient(
            http or httpx.Client(base_url=config.center_url), config.station_key
        )
        self.pending: dict[str, PendingApproval] = {}
        self._pending_lock = threading.Lock()
        self.stop_event = threading.Event()

    # -- approval gate -----------------------------------------------------

    def submit_decision(self, train_id: str, verdict: str, reason: str,
                        signature: Optional[bytes] = None, admin_key_id: Optional[str] = None) -> dict:
        """Record a signed admin decision for a pending hop (local admin API path).

        Without an explicit signature the agent signs with its configured
        admin key (browser clients hold no private keys)."""
        with self._pending_lock:
            pending = self.pending.get(train_id)
            if pending is None:
                raise StationError(f"no pending approval for {train_id}")
            if pending.decision is not None:
                raise DecisionConflict(f"{train_id} already decided")
            verdict = Verdict(verdict).value
            if signature is None:
                admin_key_id = self.config.admin_key.key_id
                signature = self.config.admin_key.sign(
                    center_mod.decision_signing_body(train_id, verdict, pending.state_digest_out)
                )
            elif admin_key_id != self.config.admin_key.key_id:
                raise UnauthorizedApprover(f"key {admin_key_id[:12]} not in this station's admin set")
            else:
                self.config.admin_key.public.verify(
                    signature,
                    center_mod.decision_signing_body(train_id, verdict, pending.state_digest_out),
                )
            pending.decision = {
                "verdict": verdict,
                "reason": reason,
                "admin_key_id": admin_key_id,
                "signature": base64.b64encode(signature).decode("ascii"),
            }
            return pending.decision

    def await_approval(self, pending: PendingApproval) -> dict:
        """Block until a signed decision exists; auto-approve short-circuits (test mode)."""
        if self.config.auto_approve and pending.decision is None:
            self.submit_decision(pending.train_id, Verdict.APPROVE.value, "auto-approved")
        while pending.decision is None and not self.stop_event.is_set():
            time.sleep(min(0.05, self.config.poll_interval / 4))
        if pending.decision is None:
            raise StationError("agent stopped while awaiting approval")
        return pending.decision

    def admin_app(self) -> FastAPI:
        app = FastAPI(title=f"station {self.config.station_id} admin")

        @app.exception_handler(StationError)
        async def _err(_request, exc: StationError):
            status = 409 if isinstance(exc, DecisionConflict) else 400
            if isinstance(exc, UnauthorizedApprover):
                status = 401
            return JSONResponse(status_code=status, content={"error": type(exc).__name__,
                                                             "detail": str(exc)})

        @app.get("/pending")
        def list_pending():
            with self._pending_lock:
                return {"pending": [p.view() for p in self.pending.values()
                                    if p.decision is None]}

        @app.post("/pending/{train_id}/decision")
        async def decide(train_id: str, request: Request):
            body = await request.json()
            if body.get("verdict") == Verdict.REJECT.value and not body.get("reason"):
                return JSONResponse(
                    status_code=400,
                    content={"error": "MissingReason", "detail": "reject requires a reason"},
                )
            decision = self.submit_decision(
                train_id,
                body["verdict"],
                body.get("reason", ""),
                signature=base64.b64decode(body["signature"]) if body.get("signature") else None,
                admin_key_id=body.get("admin_key_id"),
            )
            return {"decision": decision}

        @app.get("/station")
        def station_info():
            return {
                "station_id": self.config.station_id,
                "schema_id": self.config.schema_id,
                "row_count": self.dataset.row_count,
            }

        return app

    # -- hop processing ----------------------------------------------------

    def process_delivery(self, delivery: dict) -> str:
        """Full hop: open, verify, execute, await approval, exit control on the
        final hop, seal for the next recipient, push. Returns the new route status."""
        config = self.config
        envelope = EncryptedEnvelope.from_bytes(base64.b64decode(delivery["envelope"]))
        sender_public = PublicKey.from_wire(delivery["sender_public"])
        manifest_digest = delivery["manifest_digest"]
        associated = manifest_digest.encode("ascii")

        payload = open_envelope(envelope, config.station_key, sender_public, associated)
        archive = decode_train_archive(payload)
        manifest = archive.manifest
        if dispatch_digest(manifest) != manifest_digest:
            raise TaskFailure("archive manifest does not match the announced train digest")
        route = manifest.route
        if route.current_station != config.station_id:
            raise TaskFailure("train is not at this station's position on the route")

        task = manifest.task
        state = archive.state
        new_payload = execute_task(task, state, self.dataset)
        timestamp = center_mod.utc_now()
        new_state = state.with_hop(
            config.station_id, self.dataset.row_count, timestamp, new_payload
        )
        digest_in = hashlib.sha256(canonical_serialize(state)).hexdigest()
        digest_out = hashlib.sha256(canonical_serialize(new_state)).hexdigest()

        pending = PendingApproval(
            train_id=manifest.train_id,
            task_kind=task.kind.value,
            record_count=self.dataset.row_count,
            pre_metric=evaluate(task, state.payload, self.dataset.rows),
            post_metric=evaluate(task, new_payload, self.dataset.rows),
            state_digest_in=digest_in,
            state_digest_out=digest_out,
            created_at=timestamp,
        )
        with self._pending_lock:
            self.pending[manifest.train_id] = pending
        log.info(
            "station %s trained %s on %d records (digest %s -> %s), awaiting approval",
            config.station_id, manifest.train_id, self.dataset.row_count,
            digest_in[:12], digest_out[:12],
        )
        try:
            decision = self.await_approval(pending)
        finally:
            with self._pending_lock:
                if pending.decision is not None:
                    self.pending.pop(manifest.train_id, None)

        last_hop = route.cursor == len(route.stations) - 1
        hop_report = {
            "train_id": manifest.train_id,
            "station_id": config.station_id,
            "record_count": self.dataset.row_count,
            "state_digest_in": digest_in,
            "state_digest_out": digest_out,
            "exit_control_passed": None,
            "decision": decision,
        }

        if decision["verdict"] == Verdict.REJECT.value:
            hop_report["signature"] = self._sign_report(hop_report)
            status = self.client.push_hop(manifest.train_id, hop_report, None)
            log.info("station %s rejected %s", config.station_id, manifest.train_id)
            return status

        next_public = PublicKey.from_wire(delivery["next_public"])
        next_party = delivery["next_party"]
        expected_key_id = (
            manifest.researcher_key_id
            if next_party == center_mod.RESEARCHER_PARTY
            else manifest.station_key_ids.get(next_party)
        )
        if next_public.key_id != expected_key_id:
            raise TaskFailure("announced next-hop key does not match the manifest binding")

        out_route = route.advance()
        out_manifest = _with_route(manifest, out_route)
        result_summary = None
        if last_hop:
            draft = ResultSummary(
                task_kind=task.kind,
                metrics=evaluate(task, new_payload, self.dataset.rows),
                total_records=new_state.records_aggregated,
                released_params=model_params_view(task, new_payload),
            )
            result_summary = exit_control_check(draft, task.exit_policy)
            hop_report["exit_control_passed"] = result_summary.passed_exit_control
            if not result_summary.passed_exit_control:
                log.info(
                    "station %s exit control failed for %s: %s",
                    config.station_id,
                    manifest.train_id,
                    [c.name for c in result_summary.exit_control_report if not c.passed],
                )

        out_archive = TrainArchive(
            manifest=out_manifest,
            state=new_state,
            result_summary=result_summary if out_route.status is RouteStatus.COMPLETED else None,
        )
        sealed = seal(
            encode_train_archive(out_archive), next_public, config.station_key, associated
        )
        hop_report["signature"] = self._sign_report(hop_report)
        status = self.client.push_hop(manifest.train_id, hop_report, sealed.to_bytes())
        log.info(
            "station %s pushed %s to %s (status %s)",
            config.station_id, manifest.train_id, next_party, status,
        )
        return status

    def _sign_report(self, hop_report: dict) -> str:
        body = center_mod.hop_report_signing_body(hop_report)
        return base64.b64encode(self.config.station_key.sign(body)).decode("ascii")

    def process_once(self) -> Optional[str]:
        delivery = self.client.poll_next()
        if delivery is None:
            return None
        return self.process_delivery(delivery)

    def run(self) -> None:
        """Poll loop: failures are logged and retried with exponential backoff
        capped at 10x the poll interval."""
        backoff = self.config.poll_interval
        while not self.stop_event.is_set():
            try:
                processed = self.process_once()
                backoff = self.config.poll_interval
                if processed is None:
                    self.stop_event.wait(self.config.poll_interval)
            except Exception as exc:
                log.warning(
                    "station %s hop attempt failed: %s: %s",
                    self.config.station_id, type(exc).__name__, exc,
                )
                self.stop_event.wait(backoff)
                backoff = min(backoff * 2, 10 * self.config.poll_interval)

    def stop(self) -> None:
        self.stop_event.set()


def _with_route(manifest: TrainManifest, route: Route) -> TrainManifest:
    return TrainManifest(
        train_id=manifest.train_id,
        task=manifest.task,
        route=route,
        researcher_key_id=manifest.researcher_key_id,
        station_key_ids=manifest.station_key_ids,
        created_at=manifest.created_at,
        approvals=manifest.approvals,
        manifest_signature=manifest.manifest_signature,
    )


def dispatch_digest(manifest: TrainManifest) -> str:
    """Digest of the manifest as it was at dispatch (route rewound), which is
    the train identity every hop binds as associated data."""
    rewound = _with_route(
        manifest,
        Route(stations=manifest.route.stations, cursor=0, status=RouteStatus.IN_TRANSIT),
    )
    return hashlib.sha256(canonical_serialize(rewound)).hexdigest()
