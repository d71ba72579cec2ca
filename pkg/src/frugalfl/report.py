"""Experiment reports: assembly, JSON/CSV rendering and strategy comparison.

Report JSON layout::

    {"schema": "frugalfl.report/1",
     "body": {...},                  # deterministic under (config, seed)
     "runtime": {"wall_clock_s": x}} # excluded from comparisons

Floats are rendered with 6 significant digits so the body is byte-stable.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Any

from . import __version__
from .energy import amortized_pretraining_share, summarize

REPORT_SCHEMA = "frugalfl.report/1"
ROUND_CSV_COLUMNS = (
    "round", "selected_clients", "upload_bytes", "download_bytes",
    "val_accuracy", "val_f1", "val_roc_auc", "val_log_loss", "client_mean_accuracy",
    "duration_s", "energy_wh", "gco2e",
)
COMPARISON_COLUMNS = (
    "strategy", "accuracy", "f1", "roc_auc", "log_loss", "energy_wh", "gco2e",
    "payload_mb", "download_mb", "energy_ratio", "gco2e_ratio", "payload_ratio",
)
DEFAULT_BASELINE = "pfl-decoupled"


class ComparabilityWarning(UserWarning):
    pass


def round_sig(value: Any, digits: int = 6) -> Any:
    """Recursively round floats to ``digits`` significant digits."""
    if isinstance(value, bool) or value is None or isinstance(value, (int, str)):
        return value
    if isinstance(value, float):
        if not math.isfinite(value):
            return None
        return float(f"{value:.{digits}g}")
    if isinstance(value, dict):
        return {k: round_sig(v, digits) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [round_sig(v, digits) for v in value]
    if hasattr(value, "item"):
        return round_sig(value.item(), digits)
    raise TypeError(f"cannot render {type(value).__name__}")


@dataclass
class ExperimentReport:
    config: dict
    rounds: list
    stop: dict
    final: dict
    payload: dict
    energy: dict
    throughput: dict
    wall_clock_s: float = 0.0
    ledger: Any = None
    final_state: Any = field(default=None, repr=False)

    @property
    def strategy(self) -> str:
        return self.config["strategy"]

    @property
    def seed(self) -> int:
        return self.config["seed"]

    def body(self) -> dict:
        return round_sig({
            "artifact_version": __version__,
            "strategy": self.strategy,
            "seed": self.seed,
            "config": self.config,
            "stop": self.stop,
            "final": self.final,
            "payload": self.payload,
            "energy": self.energy,
            "throughput": self.throughput,
            "rounds": [r.to_dict() for r in self.rounds],
        })

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "body": self.body(),
            "runtime": {"wall_clock_s": round_sig(self.wall_clock_s)},
        }


def build_report(config, records, ledger, *, stopped_early, best_round, best_val_f1,
                 per_client_upload_params, wall_clock_s, final_state=None, workload=None) -> ExperimentReport:
    last = records[-1]
    summary = summarize(ledger)
    life = config.lifecycle
    upload = sum(r.total_upload_bytes for r in records)
    download = sum(r.total_download_bytes for r in records)
    train_seconds = summary["phases"]["training"]["duration_s"]
    train_samples = sum(len(d) for d in workload.client_train.values()) if workload else 0
    return ExperimentReport(
        config=config.to_dict(),
        rounds=list(records),
        stop={
            "rounds_run": len(records),
            "max_rounds": config.rounds,
            "stopped_early": stopped_early,
            "best_round": best_round,
            "best_val_f1": best_val_f1,
            "patience": config.patience,
        },
        final={
            "pooled": last.aggregate_val_metrics.to_dict(),
            "clients": {str(c): m.to_dict() for c, m in last.client_val_metrics.items()},
            "client_mean_accuracy": last.client_mean_accuracy,
        },
        payload={
            "bytes_per_param": config.cost.bytes_per_param,
            "per_client_upload_params": per_client_upload_params,
            "upload_bytes": upload,
            "download_bytes": download,
        },
        energy={
            **summary,
            "lifecycle": {
                "pretraining_share_gco2e": amortized_pretraining_share(life.pretraining_gco2e, life.share_fraction),
                "included_in_totals": False,
            },
        },
        throughput={
            "simulated_train_seconds": train_seconds,
            "train_samples": train_samples,
        },
        wall_clock_s=wall_clock_s,
        ledger=ledger,
        final_state=final_state,
    )


def _as_dict(report) -> dict:
    if isinstance(report, ExperimentReport):
        return report.to_dict()
    if isinstance(report, str):
        return json.loads(report)
    return report


def to_json(report) -> str:
    return json.dumps(_as_dict(report), sort_keys=True, indent=2)


def body_json(report) -> str:
    """The deterministic part of a report, as canonical JSON text."""
    return json.dumps(_as_dict(report)["body"], sort_keys=True, indent=2)


def load_report(text: str) -> dict:
    doc = json.loads(text)
    if doc.get("schema") != REPORT_SCHEMA:
        raise ValueError(f"unsupported report schema {doc.get('schema')!r}")
    return doc


def round_rows(report) -> list[dict]:
    body = _as_dict(report)["body"]
    rows = []
    for r in body["rounds"]:
        m = r["aggregate_val_metrics"]
        rows.append({
            "round": r["round_index"],
            "selected_clients": ";".join(str(c) for c in r["selected_clients"]),
            "upload_bytes": sum(r["upload_bytes"].values()),
            "download_bytes": sum(r["download_bytes"].values()),
            "val_accuracy": m["accuracy"],
            "val_f1": m["f1"],
            "val_roc_auc": m["roc_auc"],
            "val_log_loss": m["log_loss"],
            "client_mean_accuracy": r["client_mean_accuracy"],
            "duration_s": r["wall_duration_s"],
            "energy_wh": r["energy_wh"],
            "gco2e": r["gco2e"],
        })
    return rows


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def to_csv(report) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ROUND_CSV_COLUMNS)
    for row in round_rows(report):
        writer.writerow([_cell(row[c]) for c in ROUND_CSV_COLUMNS])
    return buf.getvalue()


def emit(report, fmt: str = "json") -> str:
    if fmt == "json":
        return to_json(report)
    if fmt == "csv":
        return to_csv(report)
    raise ValueError(f"unknown format {fmt!r}")


def _ratio(value, base):
    if value is None or base in (None, 0):
        return None
    return value / base


def compare(reports, baseline: str = DEFAULT_BASELINE) -> list[dict]:
    """One row per report, with ratios against the ``baseline`` strategy's row."""
    bodies = [_as_dict(r)["body"] for r in reports]
    if len(bodies) < 2:
        raise ValueError("compare needs at least two reports")
    tasks = {json.dumps(b["config"]["task"], sort_keys=True) for b in bodies}
    if len(tasks) > 1:
        warnings.warn("reports were produced on different task specs", ComparabilityWarning, stacklevel=2)
    rows = []
    for b in bodies:
        pooled = b["final"]["pooled"]
        total = b["energy"]["total"]
        rows.append({
            "strategy": b["strategy"],
            "accuracy": pooled["accuracy"],
            "f1": pooled["f1"],
            "roc_auc": pooled["roc_auc"],
            "log_loss": pooled["log_loss"],
            "energy_wh": total["energy_wh"],
            "gco2e": total["gco2e"],
            "payload_mb": b["payload"]["upload_bytes"] / 1e6,
            "download_mb": b["payload"]["download_bytes"] / 1e6,
            "_upload": b["payload"]["upload_bytes"],
        })
    base = next((r for r in rows if r["strategy"] == baseline), None)
    if base is None:
        raise ValueError(f"baseline strategy {baseline!r} not among {[r['strategy'] for r in rows]}")
    for row in rows:
        row["energy_ratio"] = _ratio(row["energy_wh"], base["energy_wh"])
        row["gco2e_ratio"] = _ratio(row["gco2e"], base["gco2e"])
        row["payload_ratio"] = _ratio(row["_upload"], base["_upload"])
    return [{c: row[c] for c in COMPARISON_COLUMNS} for row in rows]


def comparison_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COMPARISON_COLUMNS)
    for row in rows:
        writer.writerow([_cell(row[c]) for c in COMPARISON_COLUMNS])
    return buf.getvalue()
