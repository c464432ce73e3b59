"""Typed client for the Service Center API.

Works against any httpx-compatible client (a networked ``httpx.Client``
or an in-process ``TestClient``), signs a fresh server challenge per
authenticated request, and raises the same error classes the center
raises server-side.
"""

from __future__ import annotations

import base64
from typing import Optional

from . import center as center_mod
from .envelope import BadSignature, KeyPair, PublicKey
from .protocol import AnalysisTask, StationDescriptor

_ERROR_CLASSES = {
    cls.code: cls
    for cls in vars(center_mod).values()
    if isinstance(cls, type) and issubclass(cls, center_mod.CenterError)
}


class CenterClient:
    def __init__(self, http, key: KeyPair):
        self.http = http
        self.key = key

    def _raise_for(self, response):
        if response.status_code < 400:
            return response.json()
        body = response.json()
        code = body.get("error", "CenterError")
        detail = body.get("detail", "")
        if code == "BadSignature":
            raise BadSignature(detail)
        raise _ERROR_CLASSES.get(code, center_mod.CenterError)(detail)

    def _auth_headers(self) -> dict:
        nonce = self._raise_for(
            self.http.get("/challenge", params={"key_id": self.key.key_id})
        )["nonce"]
        signature = self.key.sign(center_mod.challenge_signing_body(nonce))
        return {
            "X-Auth-Key-Id": self.key.key_id,
            "X-Auth-Nonce": nonce,
            "X-Auth-Signature": base64.b64encode(signature).decode("ascii"),
        }

    def register_station(
        self, descriptor: StationDescriptor, station_public: PublicKey, owner_public: PublicKey
    ) -> str:
        return self._raise_for(
            self.http.post(
                "/stations",
                json={
                    "descriptor": descriptor.to_wire(),
                    "station_public": station_public.to_wire(),
                    "owner_public": owner_public.to_wire(),
                },
            )
        )["station_id"]

    def submit_task(self, task: AnalysisTask, route: list[str]) -> dict:
        """Returns {"train_id", "proposal_digest"}; the digest is what approvals sign."""
        return self._raise_for(
            self.http.post(
                "/trains",
                json={
                    "task": task.to_wire(),
                    "route": route,
                    "researcher_public": self.key.public.to_wire(),
                },
            )
        )

    def approve(self, train_id: str, verdict: str, proposal_digest: str) -> str:
        signature = self.key.sign(
            center_mod.approval_signing_body(train_id, verdict, proposal_digest)
        )
        return self._raise_for(
            self.http.post(
                f"/trains/{train_id}/approvals",
                json={
                    "key_id": self.key.key_id,
                    "verdict": verdict,
                    "signature": base64.b64encode(signature).decode("ascii"),
                },
            )
        )["status"]

    def dispatch(self, train_id: str) -> bytes:
        body = self._raise_for(self.http.post(f"/trains/{train_id}/dispatch"))
        return base64.b64decode(body["envelope"])

    def poll_next(self) -> Optional[dict]:
        return self._raise_for(
            self.http.get("/trains/next", headers=self._auth_headers())
        )["delivery"]

    def push_hop(self, train_id: str, hop_report: dict, next_envelope: Optional[bytes]) -> str:
        return self._raise_for(
            self.http.post(
                f"/trains/{train_id}/hops",
                headers=self._auth_headers(),
                json={
                    "hop_report": hop_report,
                    "next_envelope": (
                        base64.b64encode(next_envelope).decode("ascii") if next_envelope else None
                    ),
                },
            )
        )["status"]

    def fetch_results(self, train_id: str) -> dict:
        return self._raise_for(
            self.http.get(f"/trains/{train_id}/results", headers=self._auth_headers())
        )

    def route_status(self, train_id: str) -> dict:
        return self._raise_for(
            self.http.get(f"/trains/{train_id}/status", headers=self._auth_headers())
        )

    def relay_history(self, train_id: str) -> dict:
        return self._raise_for(
            self.http.get(f"/trains/{train_id}/envelopes", headers=self._auth_headers())
        )

    def train_ledger(self, train_id: str) -> dict:
        return self._raise_for(
            self.http.get(f"/trains/{train_id}/ledger", headers=self._auth_headers())
        )
