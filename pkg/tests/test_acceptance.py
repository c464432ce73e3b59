"""Acceptance gate: one test per top-level criterion, each ending in a single
PASS/FAIL line. Scenario runs are shared per module; oracles (centralized
NB, sequential SGD, finite differences, brute-force vocabulary filter) are
computed independently of the code under test wherever feasible.
"""

import math
import random
import threading
import time

import pytest
from fastapi.testclient import TestClient

from conftest import make_nb_task
from modeltrain.api import create_app
from modeltrain.center import ServiceCenter
from modeltrain.client import CenterClient
from modeltrain.envelope import (
    AuditEntry,
    BadSignature,
    EncryptedEnvelope,
    KeyRole,
    TamperDetected,
    WrongRecipient,
    chain_append,
    chain_verify,
    generate_keypair,
    open_envelope,
    seal,
)
from modeltrain.fixtures import make_sentiment_rows
from modeltrain.protocol import StationDescriptor
from modeltrain.simulate import ScenarioConfig, run_scenario, scenario_canary
from modeltrain.station import StationAgent, StationConfig
from modeltrain.tasks import tokenize

FAST = {"poll_interval": 0.02, "timeout_s": 60}


def _verdict(num: int, title: str, ok: bool) -> None:
    print(f"{'PASS' if ok else 'FAIL'} [criterion {num}] {title}")
    assert ok, f"criterion {num}: {title}"


@pytest.fixture(scope="module")
def nb_report(tmp_path_factory):
    return run_scenario(
        ScenarioConfig(task_kind="NbSentiment", n_stations=3, rows_per_station=100,
                       holdout=50, seed=42, **FAST),
        tmp_path_factory.mktemp("nb"),
    )


@pytest.fixture(scope="module")
def and_report(tmp_path_factory):
    return run_scenario(
        ScenarioConfig(task_kind="AndPairwise", n_stations=2, rows_per_station=150,
                       holdout=80, seed=11, **FAST),
        tmp_path_factory.mktemp("and"),
    )


def test_criterion_1_distributed_equals_centralized(nb_report):
    """3-station NB over 300 docs: exact state equality + 50/50 prediction
    agreement on held-out docs, in under 60 seconds."""
    ok = (
        nb_report["final_status"] == "Completed"
        and nb_report["oracle_equal"] is True
        and nb_report["prediction_agreement"] == {"agree": 50, "total": 50}
        and nb_report["runtime_s"] < 60
    )
    _verdict(1, "distributed NB equals centralized oracle exactly, <60s", ok)


def test_criterion_2_sequential_sgd_equivalence(and_report):
    """2-station AND: final state within 1e-9 relative of the sequential
    oracle; analytic gradient matches finite differences at 10 random points
    within 1e-6 relative."""
    state_ok = (
        and_report["final_status"] == "Completed"
        and and_report["oracle_equal"] is True
        and and_report["oracle_max_rel_diff"] <= 1e-9
    )

    def sigmoid(z):
        return 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))

    def loss(w, b, x, y):
        p = sigmoid(sum(wi * xi for wi, xi in zip(w, x)) + b)
        p = min(max(p, 1e-15), 1.0 - 1e-15)
        return -(y * math.log(p) + (1 - y) * math.log(1.0 - p))

    rng = random.Random(2024)
    fd_ok = True
    h = 1e-6
    for _ in range(10):
        dim = 6
        w = [rng.uniform(-2, 2) for _ in range(dim)]
        b = rng.uniform(-2, 2)
        x = [rng.uniform(-1, 1) for _ in range(dim)]
        y = rng.randrange(2)
        g = sigmoid(sum(wi * xi for wi, xi in zip(w, x)) + b) - y  # analytic dL/dz
        for k in range(dim):
            wp, wm = list(w), list(w)
            wp[k] += h
            wm[k] -= h
            fd = (loss(wp, b, x, y) - loss(wm, b, x, y)) / (2 * h)
            if abs(fd - g * x[k]) > 1e-6 * max(1.0, abs(fd)):
                fd_ok = False
        fd_b = (loss(w, b + h, x, y) - loss(w, b - h, x, y)) / (2 * h)
        if abs(fd_b - g) > 1e-6 * max(1.0, abs(fd_b)):
            fd_ok = False

    _verdict(2, "sequential SGD oracle (1e-9) + finite differences (1e-6)", state_ok and fd_ok)


def test_criterion_3_no_early_release(nb_report):
    """fetch_results must refuse at hop boundaries 1..n-1 and succeed only
    after the final hop."""
    probes = nb_report["no_early_release"]
    cursors_probed = {p["cursor"] for p in probes}
    ok = (
        all(p["fetch"] == "NotReady" for p in probes)
        and cursors_probed >= {0, 1, 2}
        and nb_report["result"] is not None
    )
    _verdict(3, "NotReady at every hop boundary, release only after hop 3", ok)


def test_criterion_4_hop_confidentiality():
    """5x5 wrong-recipient matrix all fail; 1000 random single-bit envelope
    mutations all raise TamperDetected or BadSignature."""
    keys = [generate_keypair(KeyRole.STATION, seed=f"acc4-{i}".encode()) for i in range(5)]
    matrix_ok = True
    for j, recipient in enumerate(keys):
        env = seal(b"model state bytes", recipient.public, keys[0], b"digest")
        for i, key in enumerate(keys):
            if i == j:
                matrix_ok &= open_envelope(env, key, keys[0].public, b"digest") == b"model state bytes"
            else:
                try:
                    open_envelope(env, key, keys[0].public, b"digest")
                    matrix_ok = False
                except WrongRecipient:
                    pass

    env = seal(b"mutation harness payload", keys[1].public, keys[0], b"digest")
    blob = env.to_bytes()
    rng = random.Random(4242)
    rejected = 0
    for _ in range(1000):
        mutated = bytearray(blob)
        mutated[rng.randrange(len(blob))] ^= 1 << rng.randrange(8)
        try:
            parsed = EncryptedEnvelope.from_bytes(bytes(mutated))
            open_envelope(parsed, keys[1], keys[0].public, b"digest")
        except (TamperDetected, BadSignature):
            rejected += 1
    _verdict(4, "5x5 recipient matrix + 1000/1000 bit-flip rejections", matrix_ok and rejected == 1000)


def test_criterion_5_exit_control(tmp_path_factory):
    """Record floor violation blocks the release; min_token_count=2 release
    contains exactly the tokens a brute-force vocabulary filter keeps."""
    blocked = run_scenario(
        ScenarioConfig(
            task_kind="NbSentiment", n_stations=2, rows_per_station=10, seed=9,
            exit_policy={"min_records": 10 ** 6, "min_token_count": 1,
                         "allowed_outputs": ["ModelParams", "AggregateMetrics"]},
            **FAST,
        ),
        tmp_path_factory.mktemp("blocked"),
    )
    blocked_ok = (
        blocked["final_status"] == "Blocked"
        and blocked["result"] is None
        and blocked["fetch_error"] == "BlockedByExitControl"
    )

    seed, n, rows = 101, 2, 8
    pruned = run_scenario(
        ScenarioConfig(
            task_kind="NbSentiment", n_stations=n, rows_per_station=rows, seed=seed,
            exit_policy={"min_records": 1, "min_token_count": 2,
                         "allowed_outputs": ["ModelParams", "AggregateMetrics"]},
            **FAST,
        ),
        tmp_path_factory.mktemp("pruned"),
    )
    # Brute-force oracle: regenerate the exact partitions, count every token,
    # keep only tokens with total count >= 2.
    totals = {}
    per_class = {"neg": {}, "pos": {}}
    for i in range(n):
        canary = scenario_canary(f"station-{i}", seed)
        for row in make_sentiment_rows(rows, seed + 1000 + i, canary):
            for token in tokenize(row["text"]):
                totals[token] = totals.get(token, 0) + 1
                cls = per_class[row["label"]]
                cls[token] = cls.get(token, 0) + 1
    expected = {
        label: {t: c for t, c in counts.items() if totals[t] >= 2}
        for label, counts in per_class.items()
    }
    released = pruned["result"]["released_params"]["token_counts"]
    released = {label: {t: int(c) for t, c in counts.items()} for label, counts in released.items()}
    prune_happened = any(c == 1 for c in totals.values())
    pruned_ok = (
        pruned["final_status"] == "Completed" and released == expected and prune_happened
    )
    _verdict(5, "exit control blocks + token floor matches brute-force filter", blocked_ok and pruned_ok)


def test_criterion_6_data_egress_canary(nb_report, and_report):
    """Planted canaries appear in zero decrypted payloads, zero log lines,
    zero persisted center files."""
    ok = True
    for report in (nb_report, and_report):
        scan = report["canary_scan"]
        ok &= scan["payload_leaks"] == 0
        ok &= scan["log_leaks"] == 0
        ok &= scan["persisted_leaks"] == 0
        ok &= scan["envelopes_scanned"] == report["n_stations"] + 1
    _verdict(6, "zero canary leaks in payloads, logs, persisted files", ok)


def test_criterion_7_audit_integrity(nb_report, center_key):
    """chain_verify ok on the passing scenario; a mutated entry is caught at
    or immediately after its index; the completed-run event multiset matches."""
    scenario_ok = nb_report["ledger_verification"] == "ok"
    n = nb_report["n_stations"]
    multiset_ok = nb_report["event_counts"] == {
        "TaskSubmitted": 1, "Approved": n + 1, "Dispatched": 1, "HopFetched": n,
        "HopPushed": n, "AdminDecision": n, "ExitControl": 1, "Released": 1,
    }

    from modeltrain.envelope import AuditEvent

    ledger = []
    for i, event in enumerate([AuditEvent.TASK_SUBMITTED, AuditEvent.APPROVED,
                               AuditEvent.DISPATCHED, AuditEvent.HOP_FETCHED,
                               AuditEvent.HOP_PUSHED, AuditEvent.RELEASED]):
        chain_append(ledger, event, f"actor-{i}", f"{i:064x}",
                     center_key, "2026-02-01T00:00:00Z")
    mutation_ok = True
    for idx in range(len(ledger)):
        mutated = list(ledger)
        original = mutated[idx]
        mutated[idx] = AuditEntry(
            index=original.index, prev_hash=original.prev_hash, event=original.event,
            actor_key_id="intruder", payload_digest=original.payload_digest,
            timestamp=original.timestamp, signature=original.signature,
        )
        found = chain_verify(mutated, center_key.public)
        if found == "ok" or int(found) not in (idx, idx + 1):
            mutation_ok = False
    _verdict(7, "ledger chain verifies, mutations localized, multiset exact",
             scenario_ok and multiset_ok and mutation_ok)


def test_criterion_8_approval_semantics(tmp_path_factory, nb_report, center_key, researcher_key):
    """Unanimity dispatches; one veto is terminal Rejected; without an admin
    decision no push happens for 10+ poll intervals."""
    unanimity_ok = nb_report["event_counts"]["Approved"] == 4 and nb_report[
        "event_counts"]["Dispatched"] == 1

    veto = run_scenario(
        ScenarioConfig(task_kind="NbSentiment", n_stations=2, rows_per_station=10,
                       seed=5, approval_reject=0, **FAST),
        tmp_path_factory.mktemp("veto"),
    )
    veto_ok = veto["final_status"] == "Rejected" and veto["event_counts"].get("Dispatched", 0) == 0

    # No decision, no push: one station, auto_approve off, nobody decides.
    tmp = tmp_path_factory.mktemp("nopush")
    center = ServiceCenter(tmp / "center", center_key)
    app = create_app(center)
    skey = generate_keypair(KeyRole.STATION, seed=b"acc8-s")
    akey = generate_keypair(KeyRole.STATION, seed=b"acc8-a")
    data = tmp / "rows.jsonl"
    import json as _json

    with open(data, "w") as fh:
        for row in make_sentiment_rows(10, seed=1):
            fh.write(_json.dumps(row) + "\n")
    CenterClient(TestClient(app), skey).register_station(
        StationDescriptor(station_id="solo", public_key_id=skey.key_id,
                          endpoint="loop://solo", schema_id="sentiment-v1",
                          display_name="solo"),
        skey.public, akey.public,
    )
    agent = StationAgent(
        StationConfig(station_id="solo", station_key=skey, admin_key=akey,
                      center_url="loop://center", dataset_path=str(data),
                      schema_id="sentiment-v1", poll_interval=0.05, auto_approve=False),
        http=TestClient(app),
    )
    researcher = CenterClient(TestClient(app), researcher_key)
    out = researcher.submit_task(make_nb_task(), ["solo"])
    researcher.approve(out["train_id"], "Approve", out["proposal_digest"])
    CenterClient(TestClient(app), akey).approve(out["train_id"], "Approve", out["proposal_digest"])
    researcher.dispatch(out["train_id"])
    thread = threading.Thread(target=agent.run, daemon=True)
    thread.start()
    time.sleep(12 * agent.config.poll_interval)
    view = researcher.route_status(out["train_id"])
    events = {}
    for e in researcher.train_ledger(out["train_id"])["entries"]:
        events[e["event"]] = events.get(e["event"], 0) + 1
    agent.stop()
    thread.join(timeout=5)
    nopush_ok = view["status"] == "AwaitingApproval" and events.get("HopPushed", 0) == 0

    _verdict(8, "unanimity dispatches, veto terminal, no decision => no push",
             unanimity_ok and veto_ok and nopush_ok)


def test_criterion_9_and_quality(and_report):
    """Distributed AND classifier reaches AUC >= 0.9 held out, and matches the
    single-machine oracle (so the threshold is validated against it)."""
    ok = (
        and_report["final_status"] == "Completed"
        and and_report["oracle_equal"] is True
        and and_report["heldout_metrics"]["auc"] >= 0.9
    )
    _verdict(9, f"AND held-out AUC {and_report['heldout_metrics']['auc']:.3f} >= 0.9", ok)
