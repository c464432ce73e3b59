"""Render a scenario report to files.

Given a report dict from :func:`modeltrain.simulate.run_scenario` and an
output path for the JSON report, this writes alongside it:

* ``<stem>.json``      — the full report, pretty-printed
* ``<stem>_hops.csv``  — one delimited row per hop (timing, release probe)
* ``<stem>_hops.png``  — bar chart of per-hop wall-clock time
* ``<stem>_metrics.png`` — bar chart of held-out metrics (when present)
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def render_report(report: dict, out_path: str | Path) -> list[Path]:
    """Write the JSON report plus CSV and PNG companions; returns all paths."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    stem = out_path.with_suffix("")

    json_path = out_path if out_path.suffix == ".json" else out_path.with_suffix(".json")
    json_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    written = [json_path]

    csv_path = Path(f"{stem}_hops.csv")
    timings = report.get("hop_timings_s") or []
    probes = {p["cursor"]: p["fetch"] for p in report.get("no_early_release") or []}
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["hop", "duration_s", "early_fetch_result"])
        for i, duration in enumerate(timings):
            writer.writerow([i, duration, probes.get(i, "")])
    written.append(csv_path)

    if timings:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.bar(range(len(timings)), timings, color="#4878a8")
        ax.set_xlabel("hop index")
        ax.set_ylabel("duration (s)")
        ax.set_title(f"per-hop wall time — {report.get('task_kind', '')}")
        ax.set_xticks(range(len(timings)))
        fig.tight_layout()
        hops_png = Path(f"{stem}_hops.png")
        fig.savefig(hops_png, dpi=120)
        plt.close(fig)
        written.append(hops_png)

    metrics = report.get("heldout_metrics") or {}
    if metrics:
        names = sorted(metrics)
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.bar(names, [metrics[k] for k in names], color="#5a9a68")
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("score")
        ax.set_title("held-out metrics")
        fig.tight_layout()
        metrics_png = Path(f"{stem}_metrics.png")
        fig.savefig(metrics_png, dpi=120)
        plt.close(fig)
        written.append(metrics_png)

    return written
