"""End-to-end scenario harness: one Service Center plus n station agents in a
single process over loopback transport, driving submit -> approvals ->
dispatch -> hops -> release and checking the run against independent
oracles, a no-early-release probe at every hop boundary, audit-chain
verification, and a dataset-canary leak scan.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
import secrets
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from fastapi.testclient import TestClient

from .api import create_app
from .center import NotReady, ServiceCenter, BlockedByExitControl
from .client import CenterClient
from .envelope import (
    EncryptedEnvelope,
    KeyPair,
    KeyRole,
    PublicKey,
    chain_verify,
    generate_keypair,
    open_envelope,
)
from .fixtures import make_rows
from .protocol import (
    AnalysisTask,
    ExitControlPolicy,
    RouteStatus,
    StationDescriptor,
    TaskKind,
    Verdict,
    decode_train_archive,
)
from .station import StationAgent, StationConfig
from .tasks import (
    AND_FEATURE_DIM,
    NbState,
    SgdState,
    auc_score,
    nb_predict,
    nb_update,
    rows_to_features,
)

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = "scenario-report-v1"
TERMINAL = {RouteStatus.COMPLETED.value, RouteStatus.REJECTED.value, RouteStatus.BLOCKED.value}

_SCHEMA_BY_KIND = {
    TaskKind.NB_SENTIMENT: "sentiment-v1",
    TaskKind.SGD_LOGREG: "and-pairs-v1",
    TaskKind.AND_PAIRWISE: "and-pairs-v1",
}

_DEFAULT_HYPERPARAMETERS = {
    TaskKind.NB_SENTIMENT: lambda seed: {"smoothing_alpha": 1.0, "seed": seed},
    TaskKind.SGD_LOGREG: lambda seed: {"learning_rate": 0.5, "epochs": 1, "seed": seed},
    TaskKind.AND_PAIRWISE: lambda seed: {"learning_rate": 0.5, "epochs": 1, "seed": seed},
}


def scenario_canary(station_id: str, seed: int) -> str:
    """Deterministic per-(station, seed) marker planted in every raw row; the
    leak scan greps for it verbatim in payloads, logs, and persisted files."""
    tag = hashlib.sha256(f"{seed}|{station_id}".encode()).hexdigest()[:16]
    return f"CANARY::{station_id}::{tag}"


class ScenarioFailure(Exception):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class ScenarioConfig:
    task_kind: str = TaskKind.NB_SENTIMENT.value
    n_stations: int = 3
    rows_per_station: int = 100
    holdout: int = 50
    seed: int = 42
    hyperparameters: Optional[dict] = None
    exit_policy: Optional[dict] = None
    dataset_paths: Optional[list[str]] = None  # default: generate seeded fixtures
    auto_approve: bool | list[bool] = False
    decisions: dict = field(default_factory=dict)  # station_id -> verdict at hop time
    approval_reject: Optional[int] = None  # station index voting Reject pre-dispatch
    poll_interval: float = 0.05
    timeout_s: float = 60.0

    def __post_init__(self):
        if self.n_stations < 1:
            raise ValueError("n_stations must be >= 1")
        if self.dataset_paths is not None and len(self.dataset_paths) != self.n_stations:
            raise ValueError("dataset_paths must list one file per station")

    def auto_approve_for(self, index: int) -> bool:
        if isinstance(self.auto_approve, list):
            return self.auto_approve[index]
        return self.auto_approve

    @classmethod
    def from_file(cls, path: str | Path) -> "ScenarioConfig":
        return cls(**json.loads(Path(path).read_text()))

    def build_task(self) -> AnalysisTask:
        kind = TaskKind(self.task_kind)
        hp = self.hyperparameters or _DEFAULT_HYPERPARAMETERS[kind](self.seed)
        policy = self.exit_policy or {
            "min_records": 1,
            "min_token_count": 1,
            "allowed_outputs": ["ModelParams", "AggregateMetrics"],
        }
        return AnalysisTask(
            task_id=f"task-{secrets.token_hex(4)}",
            kind=kind,
            hyperparameters=dict(hp),
            required_schema_id=_SCHEMA_BY_KIND[kind],
            exit_policy=ExitControlPolicy(
                min_records=policy["min_records"],
                min_token_count=policy["min_token_count"],
                allowed_outputs=frozenset(policy["allowed_outputs"]),
            ),
        )


class _LogCapture(logging.Handler):
    def __init__(self):
        super().__init__(level=logging.DEBUG)
        self.lines: list[str] = []

    def emit(self, record):
        self.lines.append(self.format(record))


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def sgd_sequential_oracle(dim: int, lr: float, epochs: int, partitions: list[list[dict]]):
    """Independent single-machine run: plain loops, partition after partition
    in route order, epochs passes each, file order inside a partition."""
    w = [0.0] * dim
    b = 0.0
    for part in partitions:
        for _ in range(epochs):
            for row in part:
                x = row["features"]
                g = _sigmoid(sum(wi * xi for wi, xi in zip(w, x)) + b) - float(row["label"])
                w = [wi - lr * g * xi for wi, xi in zip(w, x)]
                b -= lr * g
    return w, b


def run_scenario(config: ScenarioConfig, workdir: Optional[str | Path] = None) -> dict:
    t_start = time.monotonic()
    workdir = Path(workdir) if workdir else Path(tempfile.mkdtemp(prefix="scenario-"))
    workdir.mkdir(parents=True, exist_ok=True)

    capture = _LogCapture()
    capture.setFormatter(logging.Formatter("%(name)s %(levelname)s %(message)s"))
    root = logging.getLogger()
    old_level = root.level
    root.addHandler(capture)
    root.setLevel(logging.DEBUG)
    try:
        return _run(config, workdir, capture, t_start)
    finally:
        root.removeHandler(capture)
        root.setLevel(old_level)


def _run(config: ScenarioConfig, workdir: Path, capture: _LogCapture, t_start: float) -> dict:
    task = config.build_task()
    kind = task.kind
    schema_id = task.required_schema_id
    n = config.n_stations

    center_key = generate_keypair(KeyRole.SERVICE_CENTER, seed=f"center|{config.seed}".encode())
    center = ServiceCenter(workdir / "center", center_key)
    app = create_app(center)

    def loopback():
        return TestClient(app)

    researcher_key = generate_keypair(KeyRole.RESEARCHER, seed=f"researcher|{config.seed}".encode())
    researcher = CenterClient(loopback(), researcher_key)

    station_ids = [f"station-{i}" for i in range(n)]
    station_keys: dict[str, KeyPair] = {}
    admin_keys: dict[str, KeyPair] = {}
    canaries: dict[str, str] = {}
    partitions: dict[str, list[dict]] = {}
    agents: list[StationAgent] = []
    admin_apis: list[TestClient] = []

    for i, sid in enumerate(station_ids):
        station_keys[sid] = generate_keypair(KeyRole.STATION, seed=f"{sid}|{config.seed}|k".encode())
        admin_keys[sid] = generate_keypair(KeyRole.STATION, seed=f"{sid}|{config.seed}|a".encode())
        if config.dataset_paths is not None:
            dataset_path = Path(config.dataset_paths[i])
            with open(dataset_path, encoding="utf-8") as fh:
                partitions[sid] = [json.loads(line) for line in fh if line.strip()]
        else:
            canaries[sid] = scenario_canary(sid, config.seed)
            rows = make_rows(
                schema_id, config.rows_per_station, config.seed + 1000 + i, canaries[sid]
            )
            partitions[sid] = rows
            dataset_path = workdir / f"{sid}.jsonl"
            with open(dataset_path, "w", encoding="utf-8") as fh:
                for row in rows:
                    fh.write(json.dumps(row) + "\n")

        CenterClient(loopback(), station_keys[sid]).register_station(
            StationDescriptor(
                station_id=sid,
                public_key_id=station_keys[sid].key_id,
                endpoint=f"loopback://{sid}",
                schema_id=schema_id,
                display_name=sid,
            ),
            station_keys[sid].public,
            admin_keys[sid].public,
        )
        agent = StationAgent(
            StationConfig(
                station_id=sid,
                station_key=station_keys[sid],
                admin_key=admin_keys[sid],
                center_url="loopback://center",
                dataset_path=str(dataset_path),
                schema_id=schema_id,
                poll_interval=config.poll_interval,
                auto_approve=config.auto_approve_for(i),
            ),
            http=loopback(),
        )
        agents.append(agent)
        admin_apis.append(TestClient(agent.admin_app()))

    submitted = researcher.submit_task(task, station_ids)
    train_id = submitted["train_id"]
    proposal_digest = submitted["proposal_digest"]

    # Multi-party approval: researcher plus every route-station owner.
    researcher.approve(train_id, Verdict.APPROVE.value, proposal_digest)
    status = None
    for i, sid in enumerate(station_ids):
        verdict = (
            Verdict.REJECT.value if config.approval_reject == i else Verdict.APPROVE.value
        )
        status = CenterClient(loopback(), admin_keys[sid]).approve(
            train_id, verdict, proposal_digest
        )
        if status == RouteStatus.REJECTED.value:
            break

    report: dict = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "task_kind": kind.value,
        "n_stations": n,
        "train_id": train_id,
        "rows_per_station": config.rows_per_station,
    }

    if status == RouteStatus.REJECTED.value:
        ledger = researcher.train_ledger(train_id)
        report.update(
            final_status=status,
            result=None,
            fetch_error=_fetch_error(researcher, train_id),
            ledger_verification=ledger["verification"],
            event_counts=_event_counts(ledger["entries"]),
            hop_timings_s=[],
            no_early_release=[],
            canary_scan=_canary_scan(
                researcher, train_id, center, workdir, capture, canaries,
                station_keys, researcher_key,
            ),
            runtime_s=round(time.monotonic() - t_start, 3),
        )
        return report

    if status != RouteStatus.APPROVED.value:
        raise ScenarioFailure("approval", f"unexpected status {status}")
    researcher.dispatch(train_id)

    threads = [threading.Thread(target=a.run, daemon=True) for a in agents]
    for t in threads:
        t.start()

    hop_timings: list[float] = []
    no_early: list[dict] = []
    last_cursor = 0
    hop_t0 = time.monotonic()
    decided: set[tuple[str, int]] = set()
    final_status = None
    try:
        while time.monotonic() - t_start < config.timeout_s:
            view = researcher.route_status(train_id)
            if view["cursor"] != last_cursor:
                hop_timings.append(round(time.monotonic() - hop_t0, 4))
                hop_t0 = time.monotonic()
                if view["cursor"] < n:
                    no_early.append(
                        {"cursor": view["cursor"], "fetch": _fetch_error(researcher, train_id)}
                    )
                last_cursor = view["cursor"]
            if view["status"] in TERMINAL:
                final_status = view["status"]
                break
            if view["status"] == RouteStatus.AWAITING_APPROVAL.value and not config.auto_approve_for(
                view["cursor"]
            ):
                idx = view["cursor"]
                sid = station_ids[idx]
                if (sid, idx) not in decided:
                    pending = admin_apis[idx].get("/pending").json()["pending"]
                    if any(p["train_id"] == train_id for p in pending):
                        no_early.append(
                            {"cursor": idx, "fetch": _fetch_error(researcher, train_id)}
                        )
                        verdict = config.decisions.get(sid, Verdict.APPROVE.value)
                        reason = "scenario decision" if verdict == Verdict.APPROVE.value else "scenario veto"
                        resp = admin_apis[idx].post(
                            f"/pending/{train_id}/decision",
                            json={"verdict": verdict, "reason": reason},
                        )
                        if resp.status_code >= 400:
                            raise ScenarioFailure("admin-decision", resp.text)
                        decided.add((sid, idx))
            time.sleep(0.01)
        else:
            raise ScenarioFailure("hops", "scenario timed out before a terminal status")
    finally:
        for a in agents:
            a.stop()
        for t in threads:
            t.join(timeout=5)

    report["final_status"] = final_status
    report["hop_timings_s"] = hop_timings
    report["no_early_release"] = no_early

    ledger = researcher.train_ledger(train_id)
    report["ledger_verification"] = ledger["verification"]
    report["event_counts"] = _event_counts(ledger["entries"])
    report["event_multiset_ok"] = _multiset_ok(report["event_counts"], n) if (
        final_status == RouteStatus.COMPLETED.value
    ) else None

    result_summary = None
    final_state_payload = None
    if final_status == RouteStatus.COMPLETED.value:
        results = researcher.fetch_results(train_id)
        envelope = EncryptedEnvelope.from_bytes(base64.b64decode(results["envelope"]))
        sender = PublicKey.from_wire(results["sender_public"])
        archive = decode_train_archive(
            open_envelope(
                envelope, researcher_key, sender, results["manifest_digest"].encode("ascii")
            )
        )
        result_summary = archive.result_summary
        final_state_payload = archive.state.payload
        report["result"] = result_summary.to_wire() if result_summary else None
        report["records_aggregated"] = archive.state.records_aggregated
    else:
        report["result"] = None
        report["fetch_error"] = _fetch_error(researcher, train_id)

    report.update(
        _oracle_checks(
            kind, task, config, station_ids, partitions, final_state_payload
        )
    )
    report["canary_scan"] = _canary_scan(
        researcher, train_id, center, workdir, capture, canaries,
        station_keys, researcher_key,
    )
    report["runtime_s"] = round(time.monotonic() - t_start, 3)
    return report


def _fetch_error(researcher: CenterClient, train_id: str) -> Optional[str]:
    try:
        researcher.fetch_results(train_id)
        return None
    except NotReady:
        return "NotReady"
    except BlockedByExitControl:
        return "BlockedByExitControl"


def _event_counts(entries: list[dict]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for e in entries:
        counts[e["event"]] = counts.get(e["event"], 0) + 1
    return counts


def _multiset_ok(counts: dict[str, int], n: int) -> bool:
    expected = {
        "TaskSubmitted": 1,
        "Approved": n + 1,
        "Dispatched": 1,
        "HopFetched": n,
        "HopPushed": n,
        "AdminDecision": n,
        "ExitControl": 1,
        "Released": 1,
    }
    return counts == expected


def _oracle_checks(
    kind: TaskKind,
    task: AnalysisTask,
    config: ScenarioConfig,
    station_ids: list[str],
    partitions: dict[str, list[dict]],
    final_state_payload: Optional[bytes],
) -> dict:
    if final_state_payload is None:
        return {"oracle_equal": None}
    holdout = make_rows(task.required_schema_id, config.holdout, config.seed + 99991)

    if kind is TaskKind.NB_SENTIMENT:
        final_state = NbState.from_payload(final_state_payload)
        central = NbState.empty(("neg", "pos"), alpha=task.hyperparameters["smoothing_alpha"])
        all_rows = [row for sid in station_ids for row in partitions[sid]]
        central = nb_update(central, all_rows)
        oracle_equal = (
            final_state.class_doc_counts == central.class_doc_counts
            and final_state.token_counts == central.token_counts
            and final_state.total_tokens == central.total_tokens
        )
        agree = sum(
            1
            for row in holdout
            if nb_predict(final_state, row["text"])[0] == nb_predict(central, row["text"])[0]
        )
        accuracy = sum(
            1 for row in holdout if nb_predict(final_state, row["text"])[0] == row["label"]
        ) / len(holdout)
        return {
            "oracle_equal": oracle_equal,
            "prediction_agreement": {"agree": agree, "total": len(holdout)},
            "heldout_metrics": {"accuracy": accuracy},
        }

    final_state = SgdState.from_payload(final_state_payload)
    featurized = [rows_to_features(kind, partitions[sid]) for sid in station_ids]
    w, b = sgd_sequential_oracle(
        AND_FEATURE_DIM,
        task.hyperparameters["learning_rate"],
        task.hyperparameters["epochs"],
        featurized,
    )
    diffs = [
        abs(wi - oi) / max(1.0, abs(oi))
        for wi, oi in zip(list(final_state.weights) + [final_state.bias], w + [b])
    ]
    max_rel = max(diffs)
    heldout_feats = rows_to_features(kind, holdout)
    scores = [
        _sigmoid(sum(wi * xi for wi, xi in zip(final_state.weights, r["features"]))
                 + final_state.bias)
        for r in heldout_feats
    ]
    labels = [r["label"] for r in heldout_feats]
    auc = auc_score(labels, scores)
    accuracy = sum(1 for s, y in zip(scores, labels) if (s >= 0.5) == (y == 1)) / len(labels)
    return {
        "oracle_equal": max_rel <= 1e-9,
        "oracle_max_rel_diff": max_rel,
        "heldout_metrics": {"auc": auc, "accuracy": accuracy},
    }


def _canary_scan(
    researcher: CenterClient,
    train_id: str,
    center: ServiceCenter,
    workdir: Path,
    capture: _LogCapture,
    canaries: dict[str, str],
    station_keys: dict[str, KeyPair],
    researcher_key: KeyPair,
) -> dict:
    """Count canary occurrences in decrypted relayed payloads, captured log
    lines, and every file persisted by the center."""
    canary_values = list(canaries.values())
    keys_by_id = {k.key_id: k for k in station_keys.values()}
    keys_by_id[researcher_key.key_id] = researcher_key
    publics_by_id = {k.key_id: k.public for k in keys_by_id.values()}
    publics_by_id[center.center_key.key_id] = center.center_key.public

    payload_leaks = 0
    try:
        history = researcher.relay_history(train_id)["envelopes"]
    except Exception:
        history = []
    manifest_digest = researcher.route_status(train_id)["manifest_digest"]
    for blob in history:
        env = EncryptedEnvelope.from_bytes(base64.b64decode(blob))
        recipient = keys_by_id.get(env.recipient_key_id)
        sender = publics_by_id.get(env.sender_key_id)
        if recipient is None or sender is None:
            continue
        plaintext = open_envelope(
            env, recipient, sender, manifest_digest.encode("ascii")
        )
        payload_leaks += sum(plaintext.count(c.encode("utf-8")) for c in canary_values)

    log_leaks = sum(
        1 for line in capture.lines for c in canary_values if c in line
    )

    persisted_leaks = 0
    for path in (workdir / "center").rglob("*"):
        if path.is_file():
            data = path.read_bytes()
            persisted_leaks += sum(data.count(c.encode("utf-8")) for c in canary_values)

    return {
        "payload_leaks": payload_leaks,
        "log_leaks": log_leaks,
        "persisted_leaks": persisted_leaks,
        "envelopes_scanned": len(history),
    }
