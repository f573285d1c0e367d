"""Metric logging and the wallclock runtime breakdown.

The metric log is line-oriented JSON, one record per completed round,
idempotent on re-emission. The runtime breakdown buckets every measured
millisecond of a round into four categories (node training, parameter
transfer, aggregation, orchestration wait); the orchestration bucket is the
remainder, so the categories account for the full round wallclock.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from ..errors import FileError, MalformedBlob, NoCompletedRounds
from .experiment import ExperimentState, RoundRecord

METRIC_LOG_VERSION = "1"

CATEGORIES = ("node_training", "parameter_transfer", "aggregation",
              "orchestration_wait")


def emit_metrics(state: ExperimentState, path) -> int:
    """Append records for rounds not yet in the log; returns how many."""
    path = Path(path)
    existing = set()
    if path.is_file():
        for record in load_metric_log(path):
            existing.add(record["round_index"])
    lines = []
    for record in state.history:
        if record.round_index in existing:
            continue
        doc = {"log_version": METRIC_LOG_VERSION,
               "experiment_id": state.config.experiment_id}
        doc.update(record.to_dict())
        lines.append(json.dumps(doc, sort_keys=True))
    if not lines:
        return 0
    try:
        with path.open("a", encoding="utf-8") as fh:
            for line in lines:
                fh.write(line + "\n")
    except OSError as exc:
        raise FileError(f"cannot write metric log {path}: {exc}") from exc
    return len(lines)


def load_metric_log(path) -> list:
    path = Path(path)
    if not path.is_file():
        raise FileError(f"no metric log at {path}")
    records = []
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileError(f"cannot read metric log {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise MalformedBlob(f"{path}:{lineno}: bad record: {exc}") from exc
    return records


def history_from_metric_log(path) -> list:
    """Rebuild RoundRecords from the log (the round-trip property)."""
    return [RoundRecord.from_dict(doc) for doc in load_metric_log(path)]


@dataclass(frozen=True)
class RuntimeBreakdown:
    per_round: tuple  # one {category: ms} mapping per round
    totals: Mapping[str, float]
    total_ms: float
    overhead_fraction: float

    def __post_init__(self):
        object.__setattr__(self, "per_round", tuple(self.per_round))
        object.__setattr__(self, "totals", dict(self.totals))

    def to_dict(self) -> dict:
        return {"per_round": [dict(r) for r in self.per_round],
                "totals": dict(self.totals),
                "total_ms": self.total_ms,
                "overhead_fraction": self.overhead_fraction}


def runtime_report(state: ExperimentState) -> RuntimeBreakdown:
    """Bucket measured wallclock into the four runtime categories.

    Node-side legs are taken from the slowest responder (the node that
    bounded the researcher's wait) and scaled down if its self-reported
    total exceeds the measured wait, so the category sum never exceeds the
    measured round wallclock.
    """
    if not state.history:
        raise NoCompletedRounds("no completed rounds to report on")
    per_round = []
    totals = {c: 0.0 for c in CATEGORIES}
    grand_total = 0.0
    for record in state.history:
        buckets = _round_buckets(record)
        per_round.append(buckets)
        for c in CATEGORIES:
            totals[c] += buckets[c]
        grand_total += record.round_total_ms
    training = totals["node_training"]
    overhead_fraction = 1.0 - (training / grand_total) if grand_total > 0 else 0.0
    return RuntimeBreakdown(per_round=tuple(per_round), totals=totals,
                            total_ms=grand_total,
                            overhead_fraction=overhead_fraction)


def _round_buckets(record: RoundRecord) -> dict:
    slowest_training = 0.0
    slowest_transfer = 0.0
    slowest_total = 0.0
    for timing in record.timings.values():
        node_total = timing.total_ms()
        if node_total >= slowest_total:
            slowest_total = node_total
            slowest_training = timing.training_ms + timing.preprocessing_ms
            slowest_transfer = timing.download_ms + timing.upload_ms
    scale = 1.0
    if slowest_total > record.researcher_wait_ms > 0:
        scale = record.researcher_wait_ms / slowest_total
    node_training = slowest_training * scale
    parameter_transfer = (record.blob_upload_ms + record.blob_download_ms
                          + slowest_transfer * scale)
    aggregation = record.aggregation_ms
    orchestration = record.round_total_ms - node_training \
        - parameter_transfer - aggregation
    return {
        "node_training": node_training,
        "parameter_transfer": parameter_transfer,
        "aggregation": aggregation,
        "orchestration_wait": max(0.0, orchestration),
    }
