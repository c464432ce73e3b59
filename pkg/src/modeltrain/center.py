"""Service Center: station/key registry, task approval, train dispatch, hop relay,
route tracking, the no-early-release result gate, and the audit ledger.

The center only ever holds ciphertext after dispatch; stations seal state
end-to-end for the next hop and the center relays blobs. All mutating
operations are serialized behind one lock and persisted append-only under
a single data directory (one JSON snapshot plus one ledger file per train)
so a restart resumes exactly where the last call committed.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import secrets
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Optional

from . import envelope as env
from . import protocol as proto
from .envelope import (
    AuditEntry,
    AuditEvent,
    BadSignature,
    EncryptedEnvelope,
    KeyPair,
    PublicKey,
    chain_append,
    chain_verify,
)
from .protocol import (
    AnalysisTask,
    ApprovalRecord,
    ModelState,
    Route,
    RouteStatus,
    StationDescriptor,
    TrainArchive,
    TrainManifest,
    Verdict,
    canonical_serialize,
    encode_train_archive,
)
from .tasks import init_payload

log = logging.getLogger(__name__)

RESEARCHER_PARTY = proto.RESEARCHER_PARTY
STATE_SCHEMA_VERSION = 1


class CenterError(Exception):
    code = "CenterError"

    def __init_subclass__(cls):
        cls.code = cls.__name__


class DuplicateStation(CenterError):
    pass


class BadCredential(CenterError):
    pass


class AuthFailed(CenterError):
    pass


class UnknownStation(CenterError):
    pass


class UnknownTrain(CenterError):
    pass


class SchemaMismatch(CenterError):
    pass


class EmptyRoute(CenterError):
    pass


class NotAParty(CenterError):
    pass


class AlreadyDecided(CenterError):
    pass


class WrongStation(CenterError):
    pass


class RecipientMismatch(CenterError):
    pass


class NotReady(CenterError):
    pass


class BlockedByExitControl(CenterError):
    pass


class IllegalTransition(CenterError):
    pass


def utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def approval_signing_body(train_id: str, verdict: str, proposal_digest: str) -> bytes:
    return f"approve|{train_id}|{verdict}|{proposal_digest}".encode("ascii")


def challenge_signing_body(nonce: str) -> bytes:
    return f"challenge|{nonce}".encode("ascii")


def hop_report_signing_body(report: dict) -> bytes:
    body = {k: v for k, v in report.items() if k != "signature"}
    return json.dumps(body, sort_keys=True, separators=(",", ":")).encode("ascii")


def decision_signing_body(train_id: str, verdict: str, state_digest: str) -> bytes:
    return f"decision|{train_id}|{verdict}|{state_digest}".encode("ascii")


@dataclass
class RegistryRecord:
    descriptor: StationDescriptor
    station_public: PublicKey
    owner_public: PublicKey  # admin key: signs approvals and hop decisions

    def to_wire(self) -> dict:
        return {
            "descriptor": self.descriptor.to_wire(),
            "station_public": self.station_public.to_wire(),
            "owner_public": self.owner_public.to_wire(),
        }

    @classmethod
    def from_wire(cls, d: dict) -> "RegistryRecord":
        return cls(
            StationDescriptor.from_wire(d["descriptor"]),
            PublicKey.from_wire(d["station_public"]),
            PublicKey.from_wire(d["owner_public"]),
        )


@dataclass
class TrainRecord:
    manifest: TrainManifest
    researcher_public: PublicKey
    proposal_digest: str
    manifest_digest: str = ""  # digest of the dispatched manifest, AAD for all hops
    current_envelope: Optional[EncryptedEnvelope] = None
    final_envelope: Optional[EncryptedEnvelope] = None
    final_sender_key_id: str = ""
    fetched_by_current: bool = False
    hop_reports: list = field(default_factory=list)
    envelope_history: list[str] = field(default_factory=list)  # ciphertext blobs, base64
    ledger: list[AuditEntry] = field(default_factory=list)

    def to_wire(self) -> dict:
        return {
            "manifest": self.manifest.to_wire(),
            "researcher_public": self.researcher_public.to_wire(),
            "proposal_digest": self.proposal_digest,
            "manifest_digest": self.manifest_digest,
            "current_envelope": (
                base64.b64encode(self.current_envelope.to_bytes()).decode("ascii")
                if self.current_envelope
                else None
            ),
            "final_envelope": (
                base64.b64encode(self.final_envelope.to_bytes()).decode("ascii")
                if self.final_envelope
                else None
            ),
            "final_sender_key_id": self.final_sender_key_id,
            "fetched_by_current": self.fetched_by_current,
            "hop_reports": self.hop_reports,
            "envelope_history": self.envelope_history,
        }

    @classmethod
    def from_wire(cls, d: dict) -> "TrainRecord":
        return cls(
            manifest=TrainManifest.from_wire(d["manifest"]),
            researcher_public=PublicKey.from_wire(d["researcher_public"]),
            proposal_digest=d["proposal_digest"],
            manifest_digest=d["manifest_digest"],
            current_envelope=(
                EncryptedEnvelope.from_bytes(base64.b64decode(d["current_envelope"]))
                if d["current_envelope"]
                else None
            ),
            final_envelope=(
                EncryptedEnvelope.from_bytes(base64.b64decode(d["final_envelope"]))
                if d["final_envelope"]
                else None
            ),
            final_sender_key_id=d["final_sender_key_id"],
            fetched_by_current=d["fetched_by_current"],
            hop_reports=list(d["hop_reports"]),
            envelope_history=list(d.get("envelope_history", [])),
        )


class ServiceCenter:
    """Single-process center; all public methods are API-handler bodies."""

    def __init__(
        self,
        data_dir: str | Path,
        center_key: KeyPair,
        challenge_ttl: float = 60.0,
        now_fn: Callable[[], str] = utc_now,
    ):
        self.data_dir = Path(data_dir)
        self.center_key = center_key
        self.challenge_ttl = challenge_ttl
        self.now_fn = now_fn
        self._lock = threading.RLock()
        self._challenges: dict[str, tuple[str, float]] = {}
        self.stations: dict[str, RegistryRecord] = {}
        self.trains: dict[str, TrainRecord] = {}
        self._load()

    # -- persistence -------------------------------------------------------

    def _load(self) -> None:
        (self.data_dir / "trains").mkdir(parents=True, exist_ok=True)
        stations_file = self.data_dir / "stations.json"
        if stations_file.exists():
            data = json.loads(stations_file.read_text())
            self.stations = {k: RegistryRecord.from_wire(v) for k, v in data.items()}
        for path in sorted((self.data_dir / "trains").glob("*.json")):
            record = TrainRecord.from_wire(json.loads(path.read_text()))
            ledger_path = path.with_suffix(".ledger.jsonl")
            if ledger_path.exists():
                record.ledger = [
                    AuditEntry.from_wire(json.loads(line))
                    for line in ledger_path.read_text().splitlines()
                    if line
                ]
            self.trains[record.manifest.train_id] = record

    def _write_json(self, path: Path, payload: dict) -> None:
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(payload, sort_keys=True))
        os.replace(tmp, path)

    def _persist_stations(self) -> None:
        self._write_json(
            self.data_dir / "stations.json",
            {k: v.to_wire() for k, v in self.stations.items()},
        )

    def _persist_train(self, record: TrainRecord) -> None:
        self._write_json(
            self.data_dir / "trains" / f"{record.manifest.train_id}.json", record.to_wire()
        )

    def _append_ledger(self, record: TrainRecord, event: AuditEvent, actor: str, digest: str) -> None:
        entry = chain_append(record.ledger, event, actor, digest, self.center_key, self.now_fn())
        path = self.data_dir / "trains" / f"{record.manifest.train_id}.ledger.jsonl"
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry.to_wire(), sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    # -- authentication ----------------------------------------------------

    def issue_challenge(self, key_id: str) -> str:
        with self._lock:
            nonce = secrets.token_hex(16)
            self._challenges[nonce] = (key_id, time.monotonic() + self.challenge_ttl)
            return nonce

    def _known_public(self, key_id: str) -> Optional[PublicKey]:
        for rec in self.stations.values():
            if rec.station_public.key_id == key_id:
                return rec.station_public
            if rec.owner_public.key_id == key_id:
                return rec.owner_public
        for train in self.trains.values():
            if train.researcher_public.key_id == key_id:
                return train.researcher_public
        return None

    def verify_credential(self, credential: dict) -> str:
        """Check a signed-challenge credential; returns the authenticated key id."""
        key_id = credential.get("key_id", "")
        nonce = credential.get("nonce", "")
        signature = base64.b64decode(credential.get("signature", ""))
        with self._lock:
            issued = self._challenges.pop(nonce, None)
        if issued is None:
            raise AuthFailed("unknown or reused challenge nonce")
        issued_for, expires = issued
        if issued_for != key_id or time.monotonic() > expires:
            raise AuthFailed("challenge expired or issued to a different key")
        public = self._known_public(key_id)
        if public is None:
            raise AuthFailed(f"unregistered key {key_id[:12]}")
        try:
            public.verify(signature, challenge_signing_body(nonce))
        except BadSignature as exc:
            raise AuthFailed("challenge signature invalid") from exc
        return key_id

    # -- registry ----------------------------------------------------------

    def register_station(
        self, descriptor: StationDescriptor, station_public: PublicKey, owner_public: PublicKey
    ) -> str:
        with self._lock:
            if descriptor.station_id in self.stations:
                raise DuplicateStation(descriptor.station_id)
            if env.fingerprint(station_public.public_part) != station_public.key_id:
                raise BadCredential("station key fingerprint does not match key bytes")
            if env.fingerprint(owner_public.public_part) != owner_public.key_id:
                raise BadCredential("owner key fingerprint does not match key bytes")
            if descriptor.public_key_id != station_public.key_id:
                raise BadCredential("descriptor public_key_id does not match supplied key")
            if any(
                station_public.key_id in (r.station_public.key_id, r.owner_public.key_id)
                for r in self.stations.values()
            ):
                raise BadCredential("key fingerprint already registered")
            self.stations[descriptor.station_id] = RegistryRecord(
                descriptor, station_public, owner_public
            )
            self._persist_stations()
            log.info("registered station %s", descriptor.station_id)
            return descriptor.station_id

    # -- train lifecycle ---------------------------------------------------

    def submit_task(
        self, task: AnalysisTask, route_stations: list[str], researcher_public: PublicKey
    ) -> str:
        with self._lock:
            if not route_stations:
                raise EmptyRoute("route must contain at least one station")
            for sid in route_stations:
                if sid not in self.stations:
                    raise UnknownStation(sid)
                schema = self.stations[sid].descriptor.schema_id
                if schema != task.required_schema_id:
                    raise SchemaMismatch(
                        f"station {sid} holds schema {schema}, task needs {task.required_schema_id}"
                    )
            train_id = f"train-{secrets.token_hex(6)}"
            manifest = TrainManifest(
                train_id=train_id,
                task=task,
                route=Route(stations=tuple(route_stations)),
                researcher_key_id=researcher_public.key_id,
                station_key_ids={
                    sid: self.stations[sid].station_public.key_id for sid in route_stations
                },
                created_at=self.now_fn(),
            )
            proposal_digest = hashlib.sha256(manifest.signing_body()).hexdigest()
            record = TrainRecord(
                manifest=manifest,
                researcher_public=researcher_public,
                proposal_digest=proposal_digest,
            )
            self.trains[train_id] = record
            self._append_ledger(
                record, AuditEvent.TASK_SUBMITTED, researcher_public.key_id, proposal_digest
            )
            self._persist_train(record)
            log.info("train %s submitted for route %s", train_id, route_stations)
            return train_id

    def _record(self, train_id: str) -> TrainRecord:
        record = self.trains.get(train_id)
        if record is None:
            raise UnknownTrain(train_id)
        return record

    def _owner_party(self, key_id: str, record: TrainRecord) -> Optional[str]:
        for sid in record.manifest.route.stations:
            if self.stations[sid].owner_public.key_id == key_id:
                return sid
        if key_id == record.researcher_public.key_id:
            return RESEARCHER_PARTY
        return None

    def approve_task(self, train_id: str, approval: dict) -> str:
        """Record one party's signed verdict; unanimity approves, any veto rejects."""
        with self._lock:
            record = self._record(train_id)
            manifest = record.manifest
            if manifest.route.status is not RouteStatus.PENDING:
                raise AlreadyDecided(f"train is {manifest.route.status.value}")
            key_id = approval["key_id"]
            party = self._owner_party(key_id, record)
            if party is None:
                raise NotAParty(f"key {key_id[:12]} is neither researcher nor route owner")
            if any(a.party_id == party for a in manifest.approvals):
                raise AlreadyDecided(f"{party} already voted")
            verdict = Verdict(approval["verdict"])
            signature = base64.b64decode(approval["signature"])
            public = self._known_public(key_id)
            public.verify(
                signature, approval_signing_body(train_id, verdict.value, record.proposal_digest)
            )
            approvals = manifest.approvals + (
                ApprovalRecord(party, key_id, verdict, signature),
            )
            route = manifest.route
            self._append_ledger(record, AuditEvent.APPROVED, key_id, record.proposal_digest)
            if verdict is Verdict.REJECT:
                route = route.transition(RouteStatus.REJECTED)
            else:
                parties = {a.party_id for a in approvals}
                needed = set(route.stations) | {RESEARCHER_PARTY}
                if parties >= needed:
                    route = route.transition(RouteStatus.APPROVED)
            record.manifest = proto.TrainManifest(
                train_id=manifest.train_id,
                task=manifest.task,
                route=route,
                researcher_key_id=manifest.researcher_key_id,
                station_key_ids=manifest.station_key_ids,
                created_at=manifest.created_at,
                approvals=approvals,
                manifest_signature=manifest.manifest_signature,
            )
            self._persist_train(record)
            return record.manifest.route.status.value

    def dispatch(self, train_id: str) -> EncryptedEnvelope:
        """Seal the initial (untrained, data-free) state for the first station."""
        with self._lock:
            record = self._record(train_id)
            manifest = record.manifest
            if manifest.route.status is not RouteStatus.APPROVED:
                raise IllegalTransition(f"cannot dispatch from {manifest.route.status.value}")
            route = manifest.route.transition(RouteStatus.IN_TRANSIT)
            manifest = proto.TrainManifest(
                train_id=manifest.train_id,
                task=manifest.task,
                route=route,
                researcher_key_id=manifest.researcher_key_id,
                station_key_ids=manifest.station_key_ids,
                created_at=manifest.created_at,
                approvals=manifest.approvals,
            )
            body = manifest.signing_body()
            manifest = proto.TrainManifest(
                **{**manifest.__dict__, "manifest_signature": self.center_key.sign(body)}
            )
            record.manifest = manifest
            record.manifest_digest = hashlib.sha256(canonical_serialize(manifest)).hexdigest()

            state = ModelState(
                task_kind=manifest.task.kind,
                schema_version=STATE_SCHEMA_VERSION,
                payload=init_payload(manifest.task),
                records_aggregated=0,
            )
            archive_bytes = encode_train_archive(TrainArchive(manifest=manifest, state=state))
            first = self.stations[route.stations[0]]
            sealed = env.seal(
                archive_bytes,
                first.station_public,
                self.center_key,
                record.manifest_digest.encode("ascii"),
            )
            record.current_envelope = sealed
            record.fetched_by_current = False
            record.envelope_history.append(base64.b64encode(sealed.to_bytes()).decode("ascii"))
            self._append_ledger(
                record,
                AuditEvent.DISPATCHED,
                self.center_key.key_id,
                hashlib.sha256(sealed.to_bytes()).hexdigest(),
            )
            self._persist_train(record)
            log.info("train %s dispatched to %s", train_id, route.stations[0])
            return sealed

    def poll_next(self, credential: dict) -> Optional[dict]:
        """Deliver the pending envelope for the authenticated station, if any."""
        key_id = self.verify_credential(credential)
        with self._lock:
            for record in self.trains.values():
                manifest = record.manifest
                route = manifest.route
                if route.status not in (RouteStatus.IN_TRANSIT, RouteStatus.AWAITING_APPROVAL):
                    continue
                current = route.current_station
                if current is None:
                    continue
                if self.stations[current].station_public.key_id != key_id:
                    continue
                if record.current_envelope is None:
                    continue
                if not record.fetched_by_current:
                    record.fetched_by_current = True
                    record.manifest = self._with_route(
                        manifest, route.transition(RouteStatus.AWAITING_APPROVAL)
                    )
                    self._append_ledger(
                        record,
                        AuditEvent.HOP_FETCHED,
                        key_id,
                        hashlib.sha256(record.current_envelope.to_bytes()).hexdigest(),
                    )
                    self._persist_train(record)
                next_idx = route.cursor + 1
                if next_idx < len(route.stations):
                    next_station = route.stations[next_idx]
                    next_party = next_station
                    next_public = self.stations[next_station].station_public
                else:
                    next_party = RESEARCHER_PARTY
                    next_public = record.researcher_public
                sender_key_id = record.current_envelope.sender_key_id
                sender_public = (
                    self.center_key.public
                    if sender_key_id == self.center_key.key_id
                    else self._known_public(sender_key_id)
                )
                return {
                    "train_id": manifest.train_id,
                    "envelope": base64.b64encode(record.current_envelope.to_bytes()).decode(),
                    "manifest_digest": record.manifest_digest,
                    "sender_public": sender_public.to_wire(),
                    "next_party": next_party,
                    "next_public": next_public.to_wire(),
                }
            return None

    @staticmethod
    def _with_route(manifest: TrainManifest, route: Route) -> TrainManifest:
        return proto.TrainManifest(
            train_id=manifest.train_id,
            task=manifest.task,
            route=route,
            researcher_key_id=manifest.researcher_key_id,
            station_key_ids=manifest.station_key_ids,
            created_at=manifest.created_at,
            approvals=manifest.approvals,
            manifest_signature=manifest.manifest_signature,
        )

    def push_hop(
        self,
        train_id: str,
        credential: dict,
        hop_report: dict,
        next_envelope: Optional[bytes],
    ) -> str:
        key_id = self.verify_credential(credential)
        with self._lock:
            record = self._record(train_id)
            manifest = record.manifest
            route = manifest.route
            if route.status is not RouteStatus.AWAITING_APPROVAL:
                raise IllegalTransition(f"no hop awaiting push (status {route.status.value})")
            current = route.current_station
            station = self.stations[current]
            if station.station_public.key_id != key_id:
                raise WrongStation(f"{current} is at the cursor, not the pushing station")
            station.station_public.verify(
                base64.b64decode(hop_report["signature"]), hop_report_signing_body(hop_report)
            )
            decision = hop_report["decision"]
            if decision["admin_key_id"] != station.owner_public.key_id:
                raise BadCredential("hop decision not signed by this station's admin key")
            station.owner_public.verify(
                base64.b64decode(decision["signature"]),
                decision_signing_body(
                    train_id, decision["verdict"], hop_report["state_digest_out"]
                ),
            )
            report_digest = hashlib.sha256(hop_report_signing_body(hop_report)).hexdigest()
            self._append_ledger(record, AuditEvent.HOP_PUSHED, key_id, report_digest)
            self._append_ledger(
                record, AuditEvent.ADMIN_DECISION, decision["admin_key_id"], report_digest
            )
            record.hop_reports.append({**hop_report, "pushed_at": self.now_fn()})

            if Verdict(decision["verdict"]) is Verdict.REJECT:
                record.manifest = self._with_route(
                    manifest, route.transition(RouteStatus.REJECTED)
                )
                record.current_envelope = None
                self._persist_train(record)
                log.info("train %s rejected at %s", train_id, current)
                return record.manifest.route.status.value

            if next_envelope is None:
                raise RecipientMismatch("approved hop must carry a sealed next envelope")
            sealed = EncryptedEnvelope.from_bytes(next_envelope)
            last_hop = route.cursor == len(route.stations) - 1
            expected_recipient = (
                record.researcher_public.key_id
                if last_hop
                else self.stations[route.stations[route.cursor + 1]].station_public.key_id
            )
            if sealed.recipient_key_id != expected_recipient:
                raise RecipientMismatch(
                    "next envelope recipient does not match the next hop party"
                )
            envelope_digest = hashlib.sha256(sealed.to_bytes()).hexdigest()
            record.envelope_history.append(base64.b64encode(sealed.to_bytes()).decode("ascii"))

            if last_hop:
                exit_ok = bool(hop_report.get("exit_control_passed"))
                self._append_ledger(
                    record,
                    AuditEvent.EXIT_CONTROL,
                    key_id,
                    f"{'pass' if exit_ok else 'fail'}:{report_digest}",
                )
                if not exit_ok:
                    record.manifest = self._with_route(
                        manifest, route.transition(RouteStatus.BLOCKED)
                    )
                    record.current_envelope = None
                    self._append_ledger(record, AuditEvent.BLOCKED, key_id, report_digest)
                    self._persist_train(record)
                    log.info("train %s blocked by exit control", train_id)
                    return record.manifest.route.status.value
                record.final_envelope = sealed
                record.final_sender_key_id = key_id
                record.current_envelope = None
                record.manifest = self._with_route(
                    manifest, route.transition(RouteStatus.IN_TRANSIT).advance()
                )
                self._append_ledger(
                    record, AuditEvent.RELEASED, self.center_key.key_id, envelope_digest
                )
            else:
                record.current_envelope = sealed
                record.fetched_by_current = False
                record.manifest = self._with_route(
                    manifest, route.transition(RouteStatus.IN_TRANSIT).advance()
                )
            self._persist_train(record)
            log.info(
                "train %s hop pushed by %s -> status %s",
                train_id,
                current,
                record.manifest.route.status.value,
            )
            return record.manifest.route.status.value

    def fetch_results(self, train_id: str, credential: dict) -> dict:
        key_id = self.verify_credential(credential)
        with self._lock:
            record = self._record(train_id)
            if key_id != record.researcher_public.key_id:
                raise AuthFailed("only the train's researcher may fetch results")
            status = record.manifest.route.status
            if status is RouteStatus.BLOCKED:
                raise BlockedByExitControl(train_id)
            if status is not RouteStatus.COMPLETED or record.final_envelope is None:
                raise NotReady(f"route status {status.value}")
            sender_public = self._known_public(record.final_sender_key_id)
            return {
                "train_id": train_id,
                "envelope": base64.b64encode(record.final_envelope.to_bytes()).decode(),
                "manifest_digest": record.manifest_digest,
                "sender_public": sender_public.to_wire(),
            }

    def route_status(self, train_id: str, credential: dict) -> dict:
        key_id = self.verify_credential(credential)
        with self._lock:
            record = self._record(train_id)
            if self._owner_party(key_id, record) is None:
                raise AuthFailed("not a party to this train")
            manifest = record.manifest
            decided = {a.party_id for a in manifest.approvals}
            pending = sorted(
                (set(manifest.route.stations) | {RESEARCHER_PARTY}) - decided
            )
            return {
                "train_id": train_id,
                "proposal_digest": record.proposal_digest,
                "manifest_digest": record.manifest_digest,
                "status": manifest.route.status.value,
                "cursor": manifest.route.cursor,
                "stations": list(manifest.route.stations),
                "task_kind": manifest.task.kind.value,
                "pending_approvals": pending if manifest.route.status is RouteStatus.PENDING else [],
                "hops_completed": [
                    {"station_id": r["station_id"], "pushed_at": r.get("pushed_at", "")}
                    for r in record.hop_reports
                    if Verdict(r["decision"]["verdict"]) is Verdict.APPROVE
                ],
                "results_available": manifest.route.status is RouteStatus.COMPLETED,
            }

    def relay_history(self, train_id: str, credential: dict) -> dict:
        """Every envelope the center has relayed for this train (ciphertext only)."""
        key_id = self.verify_credential(credential)
        with self._lock:
            record = self._record(train_id)
            if self._owner_party(key_id, record) is None:
                raise AuthFailed("not a party to this train")
            return {"train_id": train_id, "envelopes": list(record.envelope_history)}

    def train_ledger(self, train_id: str, credential: dict) -> dict:
        key_id = self.verify_credential(credential)
        with self._lock:
            record = self._record(train_id)
            if self._owner_party(key_id, record) is None:
                raise AuthFailed("not a party to this train")
            verification = chain_verify(record.ledger, self.center_key.public)
            return {
                "train_id": train_id,
                "entries": [e.to_wire() for e in record.ledger],
                "verification": verification if verification == "ok" else int(verification),
            }
