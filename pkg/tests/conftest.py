import pytest

from modeltrain.envelope import KeyRole, generate_keypair
from modeltrain.protocol import (
    AnalysisTask,
    ExitControlPolicy,
    ModelState,
    Route,
    RouteStatus,
    TaskKind,
    TrainManifest,
)


def make_policy(min_records=1, min_token_count=1, allowed=("ModelParams", "AggregateMetrics")):
    return ExitControlPolicy(
        min_records=min_records,
        min_token_count=min_token_count,
        allowed_outputs=frozenset(allowed),
    )


def make_nb_task(task_id="task-nb", alpha=1.0, seed=7, policy=None):
    return AnalysisTask(
        task_id=task_id,
        kind=TaskKind.NB_SENTIMENT,
        hyperparameters={"smoothing_alpha": alpha, "seed": seed},
        required_schema_id="sentiment-v1",
        exit_policy=policy or make_policy(),
    )


def make_sgd_task(task_id="task-and", lr=0.1, epochs=1, seed=7, policy=None):
    return AnalysisTask(
        task_id=task_id,
        kind=TaskKind.AND_PAIRWISE,
        hyperparameters={"learning_rate": lr, "epochs": epochs, "seed": seed},
        required_schema_id="and-pairs-v1",
        exit_policy=policy or make_policy(),
    )


def make_manifest(n_stations=2, task=None, status=RouteStatus.PENDING, cursor=0):
    stations = tuple(f"station-{i}" for i in range(n_stations))
    return TrainManifest(
        train_id="train-0001",
        task=task or make_nb_task(),
        route=Route(stations=stations, cursor=cursor, status=status),
        researcher_key_id="ab" * 32,
        station_key_ids={s: format(i, "02x") * 32 for i, s in enumerate(stations)},
        created_at="2026-01-05T12:00:00Z",
    )


@pytest.fixture
def station_keys():
    return [generate_keypair(KeyRole.STATION, seed=f"station-{i}".encode()) for i in range(5)]


@pytest.fixture
def researcher_key():
    return generate_keypair(KeyRole.RESEARCHER, seed=b"researcher")


@pytest.fixture
def center_key():
    return generate_keypair(KeyRole.SERVICE_CENTER, seed=b"center")
