"""HTTP/JSON surface of the Service Center.

Thin FastAPI wrapper: bodies are plain JSON with binary fields base64,
handlers delegate to ServiceCenter and translate domain errors to HTTP
status codes plus a machine-readable error code.
"""

from __future__ import annotations

import base64
from typing import Optional

from fastapi import FastAPI, Header, Request
from fastapi.responses import JSONResponse

from . import center as center_mod
from .center import CenterError, ServiceCenter
from .envelope import BadSignature, PublicKey
from .protocol import AnalysisTask, StationDescriptor

_HTTP_STATUS = {
    "AuthFailed": 401,
    "BadCredential": 401,
    "BadSignature": 401,
    "NotAParty": 403,
    "UnknownStation": 404,
    "UnknownTrain": 404,
    "DuplicateStation": 409,
    "AlreadyDecided": 409,
    "NotReady": 409,
    "BlockedByExitControl": 409,
}


def _credential(key_id: str, nonce: str, signature: str) -> dict:
    return {"key_id": key_id, "nonce": nonce, "signature": signature}


def create_app(center: ServiceCenter) -> FastAPI:
    app = FastAPI(title="analysis-train service center")

    @app.exception_handler(CenterError)
    async def _center_error(_request: Request, exc: CenterError):
        return JSONResponse(
            status_code=_HTTP_STATUS.get(exc.code, 400),
            content={"error": exc.code, "detail": str(exc)},
        )

    @app.exception_handler(BadSignature)
    async def _bad_signature(_request: Request, exc: BadSignature):
        return JSONResponse(
            status_code=401, content={"error": "BadSignature", "detail": str(exc)}
        )

    @app.get("/challenge")
    def challenge(key_id: str):
        return {"nonce": center.issue_challenge(key_id)}

    @app.post("/stations")
    async def register_station(request: Request):
        body = await request.json()
        station_id = center.register_station(
            StationDescriptor.from_wire(body["descriptor"]),
            PublicKey.from_wire(body["station_public"]),
            PublicKey.from_wire(body["owner_public"]),
        )
        return {"station_id": station_id}

    @app.post("/trains")
    async def submit_task(request: Request):
        body = await request.json()
        train_id = center.submit_task(
            AnalysisTask.from_wire(body["task"]),
            list(body["route"]),
            PublicKey.from_wire(body["researcher_public"]),
        )
        return {
            "train_id": train_id,
            "proposal_digest": center.trains[train_id].proposal_digest,
        }

    @app.post("/trains/{train_id}/approvals")
    async def approve(train_id: str, request: Request):
        return {"status": center.approve_task(train_id, await request.json())}

    @app.post("/trains/{train_id}/dispatch")
    def dispatch(train_id: str):
        sealed = center.dispatch(train_id)
        return {"envelope": base64.b64encode(sealed.to_bytes()).decode("ascii")}

    @app.get("/trains/next")
    def poll_next(
        station: Optional[str] = None,
        x_auth_key_id: str = Header(default=""),
        x_auth_nonce: str = Header(default=""),
        x_auth_signature: str = Header(default=""),
    ):
        delivery = center.poll_next(_credential(x_auth_key_id, x_auth_nonce, x_auth_signature))
        return {"delivery": delivery}

    @app.post("/trains/{train_id}/hops")
    async def push_hop(
        train_id: str,
        request: Request,
        x_auth_key_id: str = Header(default=""),
        x_auth_nonce: str = Header(default=""),
        x_auth_signature: str = Header(default=""),
    ):
        body = await request.json()
        next_envelope = (
            base64.b64decode(body["next_envelope"]) if body.get("next_envelope") else None
        )
        status = center.push_hop(
            train_id,
            _credential(x_auth_key_id, x_auth_nonce, x_auth_signature),
            body["hop_report"],
            next_envelope,
        )
        return {"status": status}

    @app.get("/trains/{train_id}/results")
    def fetch_results(
        train_id: str,
        x_auth_key_id: str = Header(default=""),
        x_auth_nonce: str = Header(default=""),
        x_auth_signature: str = Header(default=""),
    ):
        return center.fetch_results(
            train_id, _credential(x_auth_key_id, x_auth_nonce, x_auth_signature)
        )

    @app.get("/trains/{train_id}/status")
    def route_status(
        train_id: str,
        x_auth_key_id: str = Header(default=""),
        x_auth_nonce: str = Header(default=""),
        x_auth_signature: str = Header(default=""),
    ):
        return center.route_status(
            train_id, _credential(x_auth_key_id, x_auth_nonce, x_auth_signature)
        )

    @app.get("/trains/{train_id}/envelopes")
    def relay_history(
        train_id: str,
        x_auth_key_id: str = Header(default=""),
        x_auth_nonce: str = Header(default=""),
        x_auth_signature: str = Header(default=""),
    ):
        return center.relay_history(
            train_id, _credential(x_auth_key_id, x_auth_nonce, x_auth_signature)
        )

    @app.get("/trains/{train_id}/ledger")
    def train_ledger(
        train_id: str,
        x_auth_key_id: str = Header(default=""),
        x_auth_nonce: str = Header(default=""),
        x_auth_signature: str = Header(default=""),
    ):
        return center.train_ledger(
            train_id, _credential(x_auth_key_id, x_auth_nonce, x_auth_signature)
        )

    return app
