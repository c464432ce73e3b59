"""Command-line entry points.

Exit codes: 0 success, 1 protocol/runtime error, 2 usage error (click's
default for bad arguments).
"""

from __future__ import annotations

import json
import sys
import threading
from pathlib import Path

import click
import httpx

from .center import CenterError, ServiceCenter
from .client import CenterClient
from .envelope import BadSignature, KeyPair, KeyRole, generate_keypair
from .protocol import AnalysisTask, ProtocolError
from .simulate import ScenarioConfig, ScenarioFailure, run_scenario
from .station import StationAgent, StationConfig, StationError


class ProtocolExit(click.ClickException):
    exit_code = 1


def _protocol_errors(fn):
    """Map domain errors to exit code 1 with the error class named."""

    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (CenterError, StationError, ProtocolError, BadSignature, ScenarioFailure) as exc:
            raise ProtocolExit(f"{type(exc).__name__}: {exc}") from exc
        except httpx.HTTPError as exc:
            raise ProtocolExit(f"transport error: {exc}") from exc

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@click.group()
def main():
    """Distributed analysis trains: encrypted model state visiting data stations."""


@main.command()
@click.option("--role", type=click.Choice([r.value for r in KeyRole]), required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True,
              help="File to write the key pair (JSON, private parts included).")
def keygen(role: str, out_path: str):
    """Generate a key pair for a station, researcher, or service center."""
    pair = generate_keypair(KeyRole(role))
    pair.save(out_path)
    click.echo(f"{pair.key_id}  ({role}) -> {out_path}")


@main.group()
def center():
    """Service Center commands."""


@center.command("run")
@click.option("--data-dir", type=click.Path(file_okay=False), required=True)
@click.option("--key", "key_file", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8470, show_default=True)
@_protocol_errors
def center_run(data_dir: str, key_file: str, host: str, port: int):
    """Run the Service Center HTTP API."""
    import uvicorn

    from .api import create_app

    app = create_app(ServiceCenter(data_dir, KeyPair.load(key_file)))
    uvicorn.run(app, host=host, port=port, log_level="warning")


@main.group()
def station():
    """Data Station commands."""


@station.command("run")
@click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False),
              required=True)
@_protocol_errors
def station_run(config_file: str):
    """Run a station agent: poll loop plus the local admin API."""
    import uvicorn

    agent = StationAgent(StationConfig.from_file(config_file))
    host, _, port = agent.config.admin_listen.partition(":")
    admin_server = uvicorn.Server(
        uvicorn.Config(agent.admin_app(), host=host or "127.0.0.1",
                       port=int(port or 0), log_level="warning")
    )
    thread = threading.Thread(target=admin_server.run, daemon=True)
    thread.start()
    try:
        agent.run()
    except KeyboardInterrupt:
        pass
    finally:
        agent.stop()
        admin_server.should_exit = True
        thread.join(timeout=5)


@station.command("approve")
@click.option("--admin-url", required=True, help="Base URL of the station admin API.")
@click.option("--train", "train_id", required=True)
@click.option("--verdict", type=click.Choice(["Approve", "Reject"]), required=True)
@click.option("--reason", default="", help="Required when rejecting.")
@_protocol_errors
def station_approve(admin_url: str, train_id: str, verdict: str, reason: str):
    """Submit the admin decision for a hop pending at a station."""
    resp = httpx.post(
        f"{admin_url.rstrip('/')}/pending/{train_id}/decision",
        json={"verdict": verdict, "reason": reason},
    )
    body = resp.json()
    if resp.status_code >= 400:
        raise ProtocolExit(f"{body.get('error')}: {body.get('detail')}")
    click.echo(json.dumps(body["decision"], indent=2))


def _client(center_url: str, key_file: str) -> CenterClient:
    return CenterClient(httpx.Client(base_url=center_url), KeyPair.load(key_file))


@main.command()
@click.option("--center-url", required=True)
@click.option("--key", "key_file", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Researcher key pair file.")
@click.option("--task", "task_file", type=click.Path(exists=True, dir_okay=False), required=True,
              help='JSON file: {"task": <AnalysisTask wire form>, "route": [station ids]}.')
@click.option("--approve", "self_approve", is_flag=True,
              help="Also record the researcher's own approval.")
@_protocol_errors
def submit(center_url: str, key_file: str, task_file: str, self_approve: bool):
    """Submit an analysis task; prints the train id and proposal digest."""
    body = json.loads(Path(task_file).read_text())
    client = _client(center_url, key_file)
    submitted = client.submit_task(AnalysisTask.from_wire(body["task"]), body["route"])
    if self_approve:
        submitted["status"] = client.approve(
            submitted["train_id"], "Approve", submitted["proposal_digest"]
        )
    click.echo(json.dumps(submitted, indent=2))


@main.command()
@click.option("--center-url", required=True)
@click.option("--key", "key_file", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--train", "train_id", required=True)
@_protocol_errors
def status(center_url: str, key_file: str, train_id: str):
    """Print the route status of a train."""
    click.echo(json.dumps(_client(center_url, key_file).route_status(train_id), indent=2))


@main.command()
@click.option("--center-url", required=True)
@click.option("--key", "key_file", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Researcher key pair file (results are sealed to this key).")
@click.option("--train", "train_id", required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None,
              help="Write the decrypted result summary JSON here instead of stdout.")
@_protocol_errors
def results(center_url: str, key_file: str, train_id: str, out_path: str):
    """Fetch, decrypt, and print the released results of a completed train."""
    import base64

    from .envelope import EncryptedEnvelope, PublicKey, open_envelope
    from .protocol import decode_train_archive

    key = KeyPair.load(key_file)
    fetched = _client(center_url, key_file).fetch_results(train_id)
    archive = decode_train_archive(
        open_envelope(
            EncryptedEnvelope.from_bytes(base64.b64decode(fetched["envelope"])),
            key,
            PublicKey.from_wire(fetched["sender_public"]),
            fetched["manifest_digest"].encode("ascii"),
        )
    )
    summary = archive.result_summary.to_wire() if archive.result_summary else None
    text = json.dumps(
        {"train_id": train_id, "records_aggregated": archive.state.records_aggregated,
         "result": summary},
        indent=2,
    )
    if out_path:
        Path(out_path).write_text(text + "\n")
        click.echo(out_path)
    else:
        click.echo(text)


@main.command()
@click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False),
              required=True, help="Scenario config JSON (mirrors ScenarioConfig).")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None,
              help="Report path; companions (hops CSV, figures) are written alongside.")
@click.option("--workdir", type=click.Path(file_okay=False), default=None)
@_protocol_errors
def simulate(config_file: str, out_path: str, workdir: str):
    """Run an end-to-end scenario in one process and emit the report."""
    report = run_scenario(ScenarioConfig.from_file(config_file), workdir)
    if out_path:
        from .report import render_report

        for path in render_report(report, out_path):
            click.echo(str(path))
    else:
        click.echo(json.dumps(report, indent=2, sort_keys=True))
    if report["final_status"] != "Completed":
        sys.exit(1)


if __name__ == "__main__":
    main()
