import hashlib
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modeltrain.protocol import (
    ARCHIVE_MAGIC,
    ARCHIVE_VERSION,
    IllegalTransition,
    InvariantViolation,
    MalformedArchive,
    ModelState,
    ResultSummary,
    Route,
    RouteStatus,
    TaskKind,
    TrainArchive,
    UnrepresentableValue,
    VersionMismatch,
    advance_route,
    canonical_real_str,
    canonical_serialize,
    decode_train_archive,
    encode_train_archive,
)

from conftest import make_manifest, make_nb_task, make_policy


class TestCanonicalSerialize:
    def test_deterministic(self):
        m = make_manifest()
        assert canonical_serialize(m) == canonical_serialize(make_manifest())

    def test_map_insertion_order_irrelevant(self):
        a = make_manifest()
        keys = dict(reversed(list(a.station_key_ids.items())))
        b = make_manifest()
        object.__setattr__(b, "station_key_ids", keys)
        assert canonical_serialize(a) == canonical_serialize(b)

    def test_nan_metric_rejected(self):
        with pytest.raises(UnrepresentableValue):
            ResultSummary(
                task_kind=TaskKind.NB_SENTIMENT,
                metrics={"accuracy": float("nan")},
                total_records=10,
            )
        with pytest.raises(UnrepresentableValue):
            canonical_real_str(float("inf"))

    def test_reals_are_decimal_strings(self):
        summary = ResultSummary(
            task_kind=TaskKind.NB_SENTIMENT, metrics={"accuracy": 0.25}, total_records=4
        )
        assert b'"accuracy":"0.25"' in canonical_serialize(summary)

    def test_injective_on_randomized_corpus(self):
        # Distinct manifests must hash to distinct canonical bytes.
        seen = {}
        for n in (1, 2, 3):
            for cursor in range(n):
                for task_id in ("t-a", "t-b"):
                    m = make_manifest(
                        n_stations=n,
                        task=make_nb_task(task_id=task_id),
                        status=RouteStatus.IN_TRANSIT,
                        cursor=cursor,
                    )
                    digest = hashlib.sha256(canonical_serialize(m)).hexdigest()
                    assert digest not in seen
                    seen[digest] = m


class TestTrainArchive:
    def test_round_trip_empty_payload(self):
        archive = TrainArchive(
            manifest=make_manifest(),
            state=ModelState(task_kind=TaskKind.NB_SENTIMENT, schema_version=1, payload=b""),
        )
        assert decode_train_archive(encode_train_archive(archive)) == archive

    def test_round_trip_with_result(self):
        manifest = make_manifest(n_stations=2, status=RouteStatus.COMPLETED, cursor=2)
        archive = TrainArchive(
            manifest=manifest,
            state=ModelState(
                task_kind=TaskKind.NB_SENTIMENT, schema_version=1, payload=b"\x00\xffstate"
            ),
            result_summary=ResultSummary(
                task_kind=TaskKind.NB_SENTIMENT,
                metrics={"accuracy": 0.875},
                total_records=8,
            ),
        )
        assert decode_train_archive(encode_train_archive(archive)) == archive

    def test_corrupt_magic_rejected(self):
        data = encode_train_archive(
            TrainArchive(
                manifest=make_manifest(),
                state=ModelState(task_kind=TaskKind.NB_SENTIMENT, schema_version=1, payload=b""),
            )
        )
        with pytest.raises(MalformedArchive):
            decode_train_archive(b"XXXX" + data[4:])

    def test_newer_version_rejected(self):
        data = encode_train_archive(
            TrainArchive(
                manifest=make_manifest(),
                state=ModelState(task_kind=TaskKind.NB_SENTIMENT, schema_version=1, payload=b""),
            )
        )
        patched = ARCHIVE_MAGIC + struct.pack(">H", ARCHIVE_VERSION + 1) + data[6:]
        with pytest.raises(VersionMismatch):
            decode_train_archive(patched)

    def test_result_requires_completed_route(self):
        with pytest.raises(InvariantViolation):
            TrainArchive(
                manifest=make_manifest(status=RouteStatus.PENDING),
                state=ModelState(task_kind=TaskKind.NB_SENTIMENT, schema_version=1, payload=b""),
                result_summary=ResultSummary(
                    task_kind=TaskKind.NB_SENTIMENT, metrics={}, total_records=0
                ),
            )

    def test_truncated_rejected(self):
        data = encode_train_archive(
            TrainArchive(
                manifest=make_manifest(),
                state=ModelState(task_kind=TaskKind.NB_SENTIMENT, schema_version=1, payload=b""),
            )
        )
        with pytest.raises(MalformedArchive):
            decode_train_archive(data[:-3])


class TestRoute:
    def test_advance_two_station_route(self):
        route = Route(stations=("s1", "s2"), cursor=0, status=RouteStatus.IN_TRANSIT)
        stepped = advance_route(route)
        assert stepped.cursor == 1 and stepped.status is RouteStatus.IN_TRANSIT

    def test_advance_to_completed(self):
        route = Route(stations=("s1", "s2"), cursor=1, status=RouteStatus.IN_TRANSIT)
        done = advance_route(route)
        assert done.cursor == 2 and done.status is RouteStatus.COMPLETED

    def test_advance_past_end_rejected(self):
        route = Route(stations=("s1", "s2"), cursor=2, status=RouteStatus.COMPLETED)
        with pytest.raises(IllegalTransition):
            advance_route(route)

    def test_duplicate_stations_rejected(self):
        with pytest.raises(InvariantViolation):
            Route(stations=("s1", "s1"))

    def test_empty_route_rejected(self):
        with pytest.raises(InvariantViolation):
            Route(stations=())

    @settings(max_examples=200, deadline=None)
    @given(
        n=st.integers(min_value=1, max_value=4),
        moves=st.lists(
            st.sampled_from(["approve", "depart", "fetch", "push", "reject", "block"]),
            max_size=12,
        ),
    )
    def test_status_sequence_stays_in_regular_language(self, n, moves):
        # Drive random operation sequences; every observed status word must
        # match Pending -> Approved -> InTransit -> (Awaiting -> InTransit)* -> terminal.
        route = Route(stations=tuple(f"s{i}" for i in range(n)))
        observed = [route.status]
        for move in moves:
            try:
                if move == "approve":
                    route = route.transition(RouteStatus.APPROVED)
                elif move == "depart":
                    route = route.transition(RouteStatus.IN_TRANSIT)
                elif move == "fetch":
                    route = route.transition(RouteStatus.AWAITING_APPROVAL)
                elif move == "push":
                    route = route.advance()
                elif move == "reject":
                    route = route.transition(RouteStatus.REJECTED)
                elif move == "block":
                    route = route.transition(RouteStatus.BLOCKED)
            except IllegalTransition:
                continue
            observed.append(route.status)

        allowed_next = {
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
            RouteStatus.COMPLETED: set(),
            RouteStatus.REJECTED: set(),
            RouteStatus.BLOCKED: set(),
        }
        for prev, nxt in zip(observed, observed[1:]):
            if nxt != prev:
                assert nxt in allowed_next[prev]
        assert (route.status is RouteStatus.COMPLETED) == (route.cursor == n)
