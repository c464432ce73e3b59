"""Distributable incremental analysis models and the schema-sample generator.

Each task is a pure state-update over per-station row partitions with no
global preprocessing, which is what lets a model travel a route and come
back trained as if all data had been in one place. Naive Bayes keeps exact
integer sufficient statistics, so distributed equals centralized exactly;
logistic-regression SGD is a deterministic sequential pass, so distributed
equals the same-order single-machine run.
"""

from __future__ import annotations

import json
import math
import random
import struct
from dataclasses import dataclass, replace
from typing import Any, Iterable, Optional, Sequence

from .protocol import AnalysisTask, TaskKind, canonical_real

AND_FEATURE_SPEC_ID = "and-pairs-v1"
AND_FEATURE_DIM = 6


class TaskError(Exception):
    pass


class UnknownLabel(TaskError):
    pass


class EmptyModel(TaskError):
    pass


class DimensionMismatch(TaskError):
    pass


class NonFiniteFeature(TaskError):
    pass


class SchemaError(TaskError):
    pass


# ---------------------------------------------------------------------------
# Dataset schemas
#
# Schema files are JSON: {"schema_id": ..., "fields": [{"name", "type", ...}]}
# with type in {string, integer, real, label, string_list}. Label fields
# declare their value set; integer fields declare a generation range.

@dataclass(frozen=True)
class SchemaField:
    name: str
    type: str
    values: tuple[str, ...] = ()  # label fields
    range: tuple[int, int] = (0, 100)  # integer fields

    def to_wire(self) -> dict:
        d: dict[str, Any] = {"name": self.name, "type": self.type}
        if self.type == "label":
            d["values"] = list(self.values)
        if self.type == "integer":
            d["range"] = list(self.range)
        return d

    @classmethod
    def from_wire(cls, d: dict) -> "SchemaField":
        return cls(
            name=d["name"],
            type=d["type"],
            values=tuple(d.get("values", ())),
            range=tuple(d.get("range", (0, 100))),
        )


@dataclass(frozen=True)
class Schema:
    schema_id: str
    fields: tuple[SchemaField, ...]

    def field_map(self) -> dict[str, SchemaField]:
        return {f.name: f for f in self.fields}

    def validate_row(self, row: dict) -> None:
        fields = self.field_map()
        extra = set(row) - set(fields) - {"_provenance"}
        if extra:
            raise SchemaError(f"unknown fields {sorted(extra)} for schema {self.schema_id}")
        for f in self.fields:
            if f.name not in row:
                raise SchemaError(f"missing field {f.name!r}")
            v = row[f.name]
            if f.type == "string" and not isinstance(v, str):
                raise SchemaError(f"{f.name}: expected string")
            elif f.type == "integer" and not isinstance(v, int):
                raise SchemaError(f"{f.name}: expected integer")
            elif f.type == "real" and not isinstance(v, (int, float)):
                raise SchemaError(f"{f.name}: expected real")
            elif f.type == "label" and v not in f.values:
                raise SchemaError(f"{f.name}: label {v!r} not in {list(f.values)}")
            elif f.type == "string_list" and (
                not isinstance(v, list) or any(not isinstance(s, str) for s in v)
            ):
                raise SchemaError(f"{f.name}: expected list of strings")

    def validate_rows(self, rows: Iterable[dict]) -> None:
        for row in rows:
            self.validate_row(row)

    def to_wire(self) -> dict:
        return {"schema_id": self.schema_id, "fields": [f.to_wire() for f in self.fields]}

    @classmethod
    def from_wire(cls, d: dict) -> "Schema":
        return cls(d["schema_id"], tuple(SchemaField.from_wire(f) for f in d["fields"]))


SENTIMENT_SCHEMA = Schema(
    "sentiment-v1",
    (
        SchemaField("text", "string"),
        SchemaField("label", "label", values=("neg", "pos")),
    ),
)

AND_PAIRS_SCHEMA = Schema(
    "and-pairs-v1",
    (
        SchemaField("name_a", "string"),
        SchemaField("name_b", "string"),
        SchemaField("coauthors_a", "string_list"),
        SchemaField("coauthors_b", "string_list"),
        SchemaField("title_a", "string"),
        SchemaField("title_b", "string"),
        SchemaField("venue_a", "string"),
        SchemaField("venue_b", "string"),
        SchemaField("year_a", "integer", range=(1970, 2020)),
        SchemaField("year_b", "integer", range=(1970, 2020)),
        SchemaField("same_author", "label", values=("0", "1")),
    ),
)

BUILTIN_SCHEMAS = {s.schema_id: s for s in (SENTIMENT_SCHEMA, AND_PAIRS_SCHEMA)}


# ---------------------------------------------------------------------------
# Tokenization

def tokenize(text: str) -> list[str]:
    """Lowercase and split on maximal runs of non-alphanumeric characters."""
    out: list[str] = []
    current: list[str] = []
    for ch in text.lower():
        if ch.isalnum():
            current.append(ch)
        elif current:
            out.append("".join(current))
            current = []
    if current:
        out.append("".join(current))
    return out


# ---------------------------------------------------------------------------
# Multinomial naive Bayes over exact integer counts

@dataclass(frozen=True)
class NbState:
    class_doc_counts: dict[str, int]
    token_counts: dict[str, dict[str, int]]
    total_tokens: dict[str, int]
    alpha: float = 1.0

    def __post_init__(self):
        for c in self.class_doc_counts:
            if self.total_tokens.get(c, 0) != sum(self.token_counts.get(c, {}).values()):
                raise TaskError(f"total_tokens[{c}] inconsistent with token_counts")

    @classmethod
    def empty(cls, labels: Sequence[str], alpha: float = 1.0) -> "NbState":
        return cls(
            class_doc_counts={c: 0 for c in labels},
            token_counts={c: {} for c in labels},
            total_tokens={c: 0 for c in labels},
            alpha=alpha,
        )

    def vocabulary(self) -> set[str]:
        vocab: set[str] = set()
        for counts in self.token_counts.values():
            vocab.update(counts)
        return vocab

    def to_payload(self) -> bytes:
        wire = {
            "class_doc_counts": self.class_doc_counts,
            "token_counts": self.token_counts,
            "total_tokens": self.total_tokens,
            "alpha": format(self.alpha, ".12g"),
        }
        return json.dumps(wire, sort_keys=True, separators=(",", ":")).encode("ascii")

    @classmethod
    def from_payload(cls, payload: bytes) -> "NbState":
        d = json.loads(payload)
        return cls(
            class_doc_counts={k: int(v) for k, v in d["class_doc_counts"].items()},
            token_counts={c: {t: int(n) for t, n in m.items()} for c, m in d["token_counts"].items()},
            total_tokens={k: int(v) for k, v in d["total_tokens"].items()},
            alpha=float(d["alpha"]),
        )


def nb_update(state: NbState, rows: Iterable[dict]) -> NbState:
    """Fold labeled text rows into the count statistics (pure addition)."""
    doc_counts = dict(state.class_doc_counts)
    token_counts = {c: dict(m) for c, m in state.token_counts.items()}
    totals = dict(state.total_tokens)
    for row in rows:
        label = row["label"]
        if label not in doc_counts:
            raise UnknownLabel(f"label {label!r} not in {sorted(doc_counts)}")
        doc_counts[label] += 1
        counts = token_counts[label]
        for token in tokenize(row["text"]):
            counts[token] = counts.get(token, 0) + 1
            totals[label] += 1
    return replace(
        state, class_doc_counts=doc_counts, token_counts=token_counts, total_tokens=totals
    )


def nb_predict(state: NbState, text: str) -> tuple[str, dict[str, float]]:
    """Smoothed log-posterior argmax; ties break to the lexicographically smallest label."""
    total_docs = sum(state.class_doc_counts.values())
    if total_docs == 0:
        raise EmptyModel("no training documents")
    vocab_size = len(state.vocabulary())
    tokens = tokenize(text)
    log_posts: dict[str, float] = {}
    for c in sorted(state.class_doc_counts):
        if state.class_doc_counts[c] == 0:
            log_posts[c] = -math.inf
            continue
        lp = math.log(state.class_doc_counts[c] / total_docs)
        denom = state.total_tokens[c] + state.alpha * vocab_size
        counts = state.token_counts[c]
        for t in tokens:
            lp += math.log((counts.get(t, 0) + state.alpha) / denom)
        log_posts[c] = lp
    best = min(log_posts, key=lambda c: (-log_posts[c], c))
    return best, log_posts


# ---------------------------------------------------------------------------
# Sequential SGD logistic regression

SGD_PAYLOAD_MAGIC = b"SGD1"


@dataclass(frozen=True)
class SgdState:
    weights: tuple[float, ...]
    bias: float
    learning_rate: float
    epochs_per_hop: int
    seed: int
    feature_spec_id: str

    def __post_init__(self):
        if any(not math.isfinite(w) for w in self.weights) or not math.isfinite(self.bias):
            raise TaskError("non-finite parameter in SGD state")

    @classmethod
    def zeros(cls, dim: int, learning_rate: float, epochs_per_hop: int, seed: int,
              feature_spec_id: str) -> "SgdState":
        return cls((0.0,) * dim, 0.0, learning_rate, epochs_per_hop, seed, feature_spec_id)

    def to_payload(self) -> bytes:
        # JSON header (length-prefixed) + d little-endian f64 weights + f64 bias;
        # binary reals keep full precision across hops.
        header = json.dumps(
            {
                "dim": len(self.weights),
                "learning_rate": format(self.learning_rate, ".12g"),
                "epochs_per_hop": self.epochs_per_hop,
                "seed": self.seed,
                "feature_spec_id": self.feature_spec_id,
            },
            sort_keys=True,
            separators=(",", ":"),
        ).encode("ascii")
        body = struct.pack(f"<{len(self.weights)}d", *self.weights) + struct.pack("<d", self.bias)
        return SGD_PAYLOAD_MAGIC + struct.pack(">H", len(header)) + header + body

    @classmethod
    def from_payload(cls, payload: bytes) -> "SgdState":
        if payload[:4] != SGD_PAYLOAD_MAGIC:
            raise TaskError("bad SGD payload magic")
        (hlen,) = struct.unpack(">H", payload[4:6])
        header = json.loads(payload[6 : 6 + hlen])
        dim = header["dim"]
        body = payload[6 + hlen :]
        if len(body) != 8 * (dim + 1):
            raise TaskError("bad SGD payload body length")
        values = struct.unpack(f"<{dim + 1}d", body)
        return cls(
            weights=tuple(values[:dim]),
            bias=values[dim],
            learning_rate=float(header["learning_rate"]),
            epochs_per_hop=header["epochs_per_hop"],
            seed=header["seed"],
            feature_spec_id=header["feature_spec_id"],
        )


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def sgd_update(state: SgdState, rows: Sequence[dict]) -> SgdState:
    """epochs_per_hop deterministic passes in file order, logistic-loss gradient steps."""
    dim = len(state.weights)
    for row in rows:
        x = row["features"]
        if len(x) != dim:
            raise DimensionMismatch(f"expected {dim} features, got {len(x)}")
        if any(not math.isfinite(v) for v in x):
            raise NonFiniteFeature(f"non-finite feature in row")
    w = list(state.weights)
    b = state.bias
    lr = state.learning_rate
    for _ in range(state.epochs_per_hop):
        for row in rows:
            x = row["features"]
            y = float(row["label"])
            g = _sigmoid(sum(wi * xi for wi, xi in zip(w, x)) + b) - y
            for i in range(dim):
                w[i] -= lr * g * x[i]
            b -= lr * g
    return replace(state, weights=tuple(w), bias=b)


def sgd_predict(state: SgdState, features: Sequence[float]) -> float:
    if len(features) != len(state.weights):
        raise DimensionMismatch(f"expected {len(state.weights)} features, got {len(features)}")
    return _sigmoid(sum(w * x for w, x in zip(state.weights, features)) + state.bias)


# ---------------------------------------------------------------------------
# Author-pair featurization

def _levenshtein(a: str, b: str) -> int:
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        row = [i]
        for j, cb in enumerate(b, 1):
            row.append(min(prev[j] + 1, row[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = row
    return prev[-1]


def _edit_similarity(a: str, b: str) -> float:
    a, b = a.lower(), b.lower()
    if not a and not b:
        return 1.0
    return 1.0 - _levenshtein(a, b) / max(len(a), len(b))


def _jaccard(a: set, b: set) -> float:
    if not a and not b:
        return 0.0
    return len(a & b) / len(a | b)


def _initials(name: str) -> tuple[str, ...]:
    return tuple(part[0] for part in tokenize(name) if part)


def and_featurize(row: dict) -> tuple[float, ...]:
    """6 components, each in [0, 1]: name similarity, initials match, coauthor
    Jaccard, title Jaccard, scaled year gap, venue token overlap."""
    name_sim = _edit_similarity(row["name_a"], row["name_b"])
    initials_match = 1.0 if _initials(row["name_a"]) == _initials(row["name_b"]) else 0.0
    coauthor_j = _jaccard(
        {c.lower() for c in row["coauthors_a"]}, {c.lower() for c in row["coauthors_b"]}
    )
    title_j = _jaccard(set(tokenize(row["title_a"])), set(tokenize(row["title_b"])))
    year_gap = min(abs(row["year_a"] - row["year_b"]) / 50.0, 1.0)
    venue_overlap = _jaccard(
        set(tokenize(row.get("venue_a", ""))), set(tokenize(row.get("venue_b", "")))
    )
    return (name_sim, initials_match, coauthor_j, title_j, year_gap, venue_overlap)


# ---------------------------------------------------------------------------
# Task plumbing: initial payloads, per-hop updates, metrics

def init_payload(task: AnalysisTask) -> bytes:
    hp = task.hyperparameters
    if task.kind is TaskKind.NB_SENTIMENT:
        labels = BUILTIN_SCHEMAS[task.required_schema_id].field_map()["label"].values
        return NbState.empty(labels, alpha=hp["smoothing_alpha"]).to_payload()
    return SgdState.zeros(
        AND_FEATURE_DIM, hp["learning_rate"], hp["epochs"], hp["seed"], AND_FEATURE_SPEC_ID
    ).to_payload()


def rows_to_features(kind: TaskKind, rows: Sequence[dict]) -> list[dict]:
    if kind is TaskKind.NB_SENTIMENT:
        return list(rows)
    return [
        {"features": list(and_featurize(r)), "label": int(r["same_author"])} for r in rows
    ]


def apply_update(task: AnalysisTask, payload: bytes, rows: Sequence[dict]) -> bytes:
    if task.kind is TaskKind.NB_SENTIMENT:
        return nb_update(NbState.from_payload(payload), rows).to_payload()
    return sgd_update(SgdState.from_payload(payload), rows_to_features(task.kind, rows)).to_payload()


def evaluate(task: AnalysisTask, payload: bytes, rows: Sequence[dict]) -> dict[str, float]:
    """Aggregate metrics of the current model over the given rows."""
    if not rows:
        return {}
    if task.kind is TaskKind.NB_SENTIMENT:
        state = NbState.from_payload(payload)
        try:
            correct = sum(1 for r in rows if nb_predict(state, r["text"])[0] == r["label"])
        except EmptyModel:
            return {"accuracy": 0.0}
        return {"accuracy": correct / len(rows)}
    state = SgdState.from_payload(payload)
    feats = rows_to_features(task.kind, rows)
    scores = [sgd_predict(state, r["features"]) for r in feats]
    labels = [r["label"] for r in feats]
    correct = sum(1 for s, y in zip(scores, labels) if (s >= 0.5) == (y == 1))
    metrics = {"accuracy": correct / len(rows)}
    auc = auc_score(labels, scores)
    if auc is not None:
        metrics["auc"] = auc
    return metrics


def model_params_view(task: AnalysisTask, payload: bytes) -> dict:
    """JSON view of the trained parameters, as released to the researcher."""
    if task.kind is TaskKind.NB_SENTIMENT:
        state = NbState.from_payload(payload)
        return {
            "class_doc_counts": dict(state.class_doc_counts),
            "token_counts": {c: dict(m) for c, m in state.token_counts.items()},
            "alpha": canonical_real(state.alpha),
        }
    state = SgdState.from_payload(payload)
    return {
        "weights": [canonical_real(w) for w in state.weights],
        "bias": canonical_real(state.bias),
        "feature_spec_id": state.feature_spec_id,
    }


def auc_score(labels: Sequence[int], scores: Sequence[float]) -> Optional[float]:
    """Rank-based AUC (Mann-Whitney); None when a class is absent."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    if not pos or not neg:
        return None
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


# ---------------------------------------------------------------------------
# Schema-sample generation

_WORDS = (
    "good great fine solid happy warm bright clear strong fresh "
    "bad poor weak dull cold flat rough sour stale grim "
    "movie film plot actor scene story music sound score ending "
    "paper model data graph study method result table figure test"
).split()

@dataclass(frozen=True)
class SchemaSample:
    schema_id: str
    rows: tuple[dict, ...]
    seed: int
    provenance: str = "synthetic"


def generate_schema_sample(schema: Schema, n: int, seed: int) -> SchemaSample:
    """n deterministic synthetic rows; the generator never reads real data."""
    rng = random.Random(seed)
    rows = []
    for _ in range(n):
        row: dict[str, Any] = {"_provenance": "synthetic"}
        for f in schema.fields:
            if f.type == "string":
                row[f.name] = " ".join(rng.choice(_WORDS) for _ in range(rng.randint(3, 8)))
            elif f.type == "integer":
                row[f.name] = rng.randint(f.range[0], f.range[1])
            elif f.type == "real":
                row[f.name] = rng.random()
            elif f.type == "label":
                row[f.name] = rng.choice(f.values)
            elif f.type == "string_list":
                row[f.name] = rng.sample(_WORDS, rng.randint(0, 4))
        rows.append(row)
    return SchemaSample(schema.schema_id, tuple(rows), seed)
