"""Lossless experiment checkpoints.

The checkpoint is a JSON document carrying the full ExperimentState; float
parameters are rendered with shortest round-trip decimals, so a resumed run
continues bit-identically under fixed seeds and deterministic nodes.
"""

from __future__ import annotations

import json
from pathlib import Path

from ..errors import FileError, MalformedCheckpoint, VersionMismatch
from ..mlcore.params import deserialize_params, serialize_params
from ..util import atomic_write_text
from .experiment import CHECKPOINT_FORMAT_VERSION, ExperimentConfig, \
    ExperimentState, RoundRecord


def save_checkpoint(state: ExperimentState, path) -> None:
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": state.config.to_dict(),
        "round_index": state.round_index,
        "global_params": json.loads(
            serialize_params(state.global_params).decode("utf-8")),
        "history": [r.to_dict() for r in state.history],
        "rng_state": state.rng_state,
    }
    try:
        atomic_write_text(Path(path), json.dumps(doc, sort_keys=True))
    except OSError as exc:
        raise FileError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> ExperimentState:
    path = Path(path)
    if not path.is_file():
        raise FileError(f"no checkpoint at {path}")
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedCheckpoint(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise MalformedCheckpoint(f"{path}: missing format_version")
    if doc["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise VersionMismatch(
            f"{path}: checkpoint version {doc['format_version']!r} "
            f"is not {CHECKPOINT_FORMAT_VERSION!r}")
    try:
        return ExperimentState(
            config=ExperimentConfig.from_dict(doc["config"]),
            round_index=doc["round_index"],
            global_params=deserialize_params(
                json.dumps(doc["global_params"]).encode("utf-8")),
            history=[RoundRecord.from_dict(r) for r in doc["history"]],
            rng_state=doc["rng_state"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedCheckpoint(f"bad checkpoint {path}: {exc}") from exc
