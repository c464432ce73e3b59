"""Station agent tests: dataset loading, restricted execution, exit control,
the admin decision API, and full hop processing against a live center."""

import base64
import json
import socket
import threading
import time
import urllib.request

import pytest
from fastapi.testclient import TestClient

from conftest import make_nb_task, make_policy
from modeltrain.api import create_app
from modeltrain.center import ServiceCenter
from modeltrain.client import CenterClient
from modeltrain.envelope import KeyRole, generate_keypair
from modeltrain.fixtures import make_sentiment_rows
from modeltrain.protocol import (
    OUTPUT_AGGREGATE_METRICS,
    OUTPUT_MODEL_PARAMS,
    ResultSummary,
    StationDescriptor,
    TaskKind,
)
from modeltrain.station import (
    FatalConfig,
    StationAgent,
    StationConfig,
    TaskFailure,
    exit_control_check,
    load_dataset,
    restricted_executor,
)
from modeltrain.tasks import BUILTIN_SCHEMAS


def _write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


class TestDatasetLoading:
    def test_valid_dataset_loads(self, tmp_path):
        path = tmp_path / "data.jsonl"
        _write_jsonl(path, make_sentiment_rows(10, seed=1))
        ds = load_dataset(path, BUILTIN_SCHEMAS["sentiment-v1"])
        assert ds.row_count == 10

    def test_invalid_row_rejected(self, tmp_path):
        path = tmp_path / "data.jsonl"
        _write_jsonl(path, [{"text": "fine film", "label": "maybe"}])
        with pytest.raises(Exception):
            load_dataset(path, BUILTIN_SCHEMAS["sentiment-v1"])

    def test_agent_refuses_bad_dataset(self, tmp_path):
        path = tmp_path / "data.jsonl"
        _write_jsonl(path, [{"wrong": "shape"}])
        key = generate_keypair(KeyRole.STATION, seed=b"k")
        with pytest.raises(FatalConfig):
            StationAgent(
                StationConfig(
                    station_id="s",
                    station_key=key,
                    admin_key=key,
                    center_url="http://127.0.0.1:1",
                    dataset_path=str(path),
                    schema_id="sentiment-v1",
                )
            )


class TestRestrictedExecutor:
    def test_socket_blocked_inside(self):
        with restricted_executor():
            with pytest.raises(TaskFailure):
                socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            with pytest.raises(TaskFailure):
                socket.create_connection(("127.0.0.1", 9))

    def test_socket_restored_after(self):
        with restricted_executor():
            pass
        s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        s.close()


class TestExitControl:
    def _summary(self, total=100, token_counts=None, metrics=None):
        params = None
        if token_counts is not None:
            params = {"class_doc_counts": {"pos": 1}, "token_counts": token_counts, "alpha": 1.0}
        return ResultSummary(
            task_kind=TaskKind.NB_SENTIMENT,
            metrics=metrics or {},
            total_records=total,
            released_params=params,
        )

    def test_min_records_blocks(self):
        out = exit_control_check(self._summary(total=5), make_policy(min_records=10))
        assert not out.passed_exit_control
        assert out.released_params is None

    def test_token_pruning(self):
        counts = {"pos": {"warm": 3, "rare": 1}, "neg": {"rare": 1, "cold": 2}}
        out = exit_control_check(
            self._summary(token_counts=counts), make_policy(min_token_count=3)
        )
        assert out.passed_exit_control
        released = out.released_params["token_counts"]
        assert "rare" not in released["pos"] and "rare" not in released["neg"]
        assert released["pos"]["warm"] == 3
        # "cold" totals 2 < 3 so it is pruned as well
        assert "cold" not in released["neg"]

    def test_disallowed_category_blocks(self):
        out = exit_control_check(
            self._summary(token_counts={"pos": {}}, metrics={"accuracy": 0.9}),
            make_policy(allowed=(OUTPUT_AGGREGATE_METRICS,)),
        )
        assert not out.passed_exit_control
        assert out.released_params is None

    def test_all_pass(self):
        out = exit_control_check(
            self._summary(token_counts={"pos": {"warm": 5}}, metrics={"accuracy": 0.9}),
            make_policy(),
        )
        assert out.passed_exit_control
        assert [c.passed for c in out.exit_control_report] == [True, True, True]


@pytest.fixture
def live_setup(tmp_path, center_key, researcher_key):
    """One center, two registered stations with agents (not yet polling)."""
    center = ServiceCenter(tmp_path / "center", center_key)
    app = create_app(center)
    agents = []
    sids = []
    for i in range(2):
        sid = f"st-{i}"
        skey = generate_keypair(KeyRole.STATION, seed=f"live-s{i}".encode())
        akey = generate_keypair(KeyRole.STATION, seed=f"live-a{i}".encode())
        path = tmp_path / f"{sid}.jsonl"
        _write_jsonl(path, make_sentiment_rows(20, seed=10 + i))
        CenterClient(TestClient(app), skey).register_station(
            StationDescriptor(
                station_id=sid, public_key_id=skey.key_id,
                endpoint=f"loop://{sid}", schema_id="sentiment-v1", display_name=sid,
            ),
            skey.public, akey.public,
        )
        agents.append(
            StationAgent(
                StationConfig(
                    station_id=sid, station_key=skey, admin_key=akey,
                    center_url="loop://center", dataset_path=str(path),
                    schema_id="sentiment-v1", poll_interval=0.02, auto_approve=True,
                ),
                http=TestClient(app),
            )
        )
        sids.append(sid)
    researcher = CenterClient(TestClient(app), researcher_key)
    return center, app, agents, sids, researcher


def _approved_train(agents, sids, researcher):
    out = researcher.submit_task(make_nb_task(), sids)
    researcher.approve(out["train_id"], "Approve", out["proposal_digest"])
    for agent in agents:
        CenterClient(agent.client.http, agent.config.admin_key).approve(
            out["train_id"], "Approve", out["proposal_digest"]
        )
    return out["train_id"]


class TestHopProcessing:
    def test_full_route_by_explicit_hops(self, live_setup):
        center, app, agents, sids, researcher = live_setup
        train_id = _approved_train(agents, sids, researcher)
        researcher.dispatch(train_id)

        assert agents[1].process_once() is None  # not this station's turn
        assert agents[0].process_once() == "InTransit"
        assert agents[0].process_once() is None  # nothing pending anymore
        assert agents[1].process_once() == "Completed"

        view = researcher.route_status(train_id)
        assert view["status"] == "Completed"
        assert [h["station_id"] for h in view["hops_completed"]] == sids
        assert researcher.fetch_results(train_id)["train_id"] == train_id

    def test_admin_api_decision_flow(self, live_setup):
        center, app, agents, sids, researcher = live_setup
        agents[0].config.auto_approve = False
        train_id = _approved_train(agents, sids, researcher)
        researcher.dispatch(train_id)

        admin = TestClient(agents[0].admin_app())
        done = {}

        def hop():
            done["status"] = agents[0].process_once()

        t = threading.Thread(target=hop)
        t.start()
        deadline = time.monotonic() + 5
        while time.monotonic() < deadline:
            pending = admin.get("/pending").json()["pending"]
            if pending:
                break
            time.sleep(0.01)
        assert pending and pending[0]["train_id"] == train_id
        assert pending[0]["record_count"] == 20

        resp = admin.post(
            f"/pending/{train_id}/decision", json={"verdict": "Reject"}
        )
        assert resp.status_code == 400  # reject requires a reason

        resp = admin.post(
            f"/pending/{train_id}/decision",
            json={"verdict": "Approve", "reason": "metrics fine"},
        )
        assert resp.status_code == 200
        t.join(timeout=5)
        assert done["status"] == "InTransit"

        resp = admin.post(
            f"/pending/{train_id}/decision",
            json={"verdict": "Approve", "reason": "again"},
        )
        assert resp.status_code == 400  # nothing pending anymore

    def test_admin_reject_terminates_route(self, live_setup):
        center, app, agents, sids, researcher = live_setup
        agents[0].config.auto_approve = False
        train_id = _approved_train(agents, sids, researcher)
        researcher.dispatch(train_id)

        admin = TestClient(agents[0].admin_app())
        result = {}
        t = threading.Thread(target=lambda: result.update(s=agents[0].process_once()))
        t.start()
        deadline = time.monotonic() + 5
        while time.monotonic() < deadline:
            if admin.get("/pending").json()["pending"]:
                break
            time.sleep(0.01)
        admin.post(
            f"/pending/{train_id}/decision",
            json={"verdict": "Reject", "reason": "site policy"},
        )
        t.join(timeout=5)
        assert result["s"] == "Rejected"
        assert researcher.route_status(train_id)["status"] == "Rejected"

    def test_no_push_without_decision(self, live_setup):
        """auto_approve off and no admin decision: the train must sit at
        AwaitingApproval with zero pushes for 10+ poll intervals."""
        center, app, agents, sids, researcher = live_setup
        agents[0].config.auto_approve = False
        train_id = _approved_train(agents, sids, researcher)
        researcher.dispatch(train_id)

        t = threading.Thread(target=agents[0].run, daemon=True)
        t.start()
        time.sleep(12 * agents[0].config.poll_interval)
        view = researcher.route_status(train_id)
        assert view["status"] == "AwaitingApproval"
        assert view["hops_completed"] == []
        counts = {}
        for e in researcher.train_ledger(train_id)["entries"]:
            counts[e["event"]] = counts.get(e["event"], 0) + 1
        assert counts.get("HopPushed", 0) == 0
        agents[0].stop()
        t.join(timeout=5)

    def test_relay_blindness(self, live_setup, tmp_path):
        """After dispatch the center's persisted files contain no plaintext
        model state: plant a marker token, complete the route, scan."""
        center, app, agents, sids, researcher = live_setup
        marker = "zzmarkerzz"
        path = tmp_path / "marked.jsonl"
        rows = make_sentiment_rows(20, seed=77)
        for row in rows:
            row["text"] += f" {marker}"
        _write_jsonl(path, rows)
        agents[0].dataset = load_dataset(path, BUILTIN_SCHEMAS["sentiment-v1"])

        train_id = _approved_train(agents, sids, researcher)
        researcher.dispatch(train_id)
        agents[0].process_once()
        agents[1].process_once()
        assert researcher.route_status(train_id)["status"] == "Completed"

        for file in (tmp_path / "center").rglob("*"):
            if file.is_file():
                assert marker.encode() not in file.read_bytes(), file


class TestNetworkedSmoke:
    def test_uvicorn_round_trip(self, tmp_path, center_key, researcher_key):
        """One smoke test over a real TCP socket: register + submit + status."""
        import uvicorn

        center = ServiceCenter(tmp_path / "center", center_key)
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.bind(("127.0.0.1", 0))
        port = sock.getsockname()[1]
        sock.close()
        server = uvicorn.Server(
            uvicorn.Config(create_app(center), host="127.0.0.1", port=port, log_level="error")
        )
        thread = threading.Thread(target=server.run, daemon=True)
        thread.start()
        deadline = time.monotonic() + 10
        base = f"http://127.0.0.1:{port}"
        while time.monotonic() < deadline:
            try:
                urllib.request.urlopen(f"{base}/challenge?key_id=x", timeout=1)
                break
            except Exception:
                time.sleep(0.05)
        try:
            import httpx

            skey = generate_keypair(KeyRole.STATION, seed=b"netsmoke-s")
            akey = generate_keypair(KeyRole.STATION, seed=b"netsmoke-a")
            with httpx.Client(base_url=base) as http:
                CenterClient(http, skey).register_station(
                    StationDescriptor(
                        station_id="net-0", public_key_id=skey.key_id,
                        endpoint=base, schema_id="sentiment-v1", display_name="net-0",
                    ),
                    skey.public, akey.public,
                )
                researcher = CenterClient(http, researcher_key)
                out = researcher.submit_task(make_nb_task(), ["net-0"])
                view = researcher.route_status(out["train_id"])
                assert view["status"] == "Pending"
        finally:
            server.should_exit = True
            thread.join(timeout=10)
