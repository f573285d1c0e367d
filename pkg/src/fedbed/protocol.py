"""Wire-level message types, canonical plan serialization, and content hashing.

Everything that crosses a process boundary is defined here: the versioned
``MessageEnvelope`` with its kind-tagged payload bodies, the declarative
``TrainingPlan`` (the unit of node approval, identified by its SHA-256
content hash), and the tunable ``TrainingArgs`` that deliberately live
*outside* the hashed plan so they can change between rounds without
re-approval.

Encoding is UTF-8 JSON with sorted keys and no insignificant whitespace;
one envelope equals one document. On stream transports each document is
length-prefixed with a 4-byte big-endian byte count (see ``broker.wire``).
"""

from __future__ import annotations

import hashlib
import json
import math
import uuid
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Any, Mapping, Optional, Union

from .errors import (
    HashMismatch,
    KindMismatch,
    MalformedMessage,
    UnsupportedVersion,
)

PROTOCOL_VERSION = "1.0"

HIDDEN_ACTIVATIONS = ("relu", "tanh", "sigmoid")


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise MalformedMessage(message)


def _get(data: Mapping, key: str, typ) -> Any:
    if not isinstance(data, Mapping) or key not in data:
        raise MalformedMessage(f"missing field {key!r}")
    value = data[key]
    if typ is int and isinstance(value, bool):
        raise MalformedMessage(f"field {key!r} has wrong type")
    if not isinstance(value, typ):
        raise MalformedMessage(f"field {key!r} has wrong type")
    return value


class MessageKind(str, Enum):
    SEARCH_REQUEST = "search_request"
    SEARCH_REPLY = "search_reply"
    TRAIN_REQUEST = "train_request"
    TRAIN_REPLY = "train_reply"
    APPROVAL_STATUS_REQUEST = "approval_status_request"
    APPROVAL_STATUS_REPLY = "approval_status_reply"
    MONITOR = "monitor"
    ERROR = "error"
    PING = "ping"
    PONG = "pong"


class LossKind(str, Enum):
    MSE = "mse"
    CROSS_ENTROPY = "cross_entropy"
    SOFT_DICE = "soft_dice"


class MetricKind(str, Enum):
    MSE = "mse"
    ACCURACY = "accuracy"
    DICE_SCORE = "dice_score"


class TrainStatus(str, Enum):
    SUCCESS = "success"
    REFUSED = "refused"
    ERROR = "error"


# --- model / plan schema -----------------------------------------------------

@dataclass(frozen=True)
class LinearRegressionSpec:
    in_dim: int
    kind: str = "linear_regression"

    def __post_init__(self):
        _require(self.kind == "linear_regression", "bad model kind")
        _require(isinstance(self.in_dim, int) and self.in_dim >= 1,
                 "in_dim must be a positive integer")


@dataclass(frozen=True)
class LogisticRegressionSpec:
    in_dim: int
    classes: int
    kind: str = "logistic_regression"

    def __post_init__(self):
        _require(self.kind == "logistic_regression", "bad model kind")
        _require(isinstance(self.in_dim, int) and self.in_dim >= 1,
                 "in_dim must be a positive integer")
        _require(isinstance(self.classes, int) and self.classes >= 2,
                 "classes must be >= 2")


@dataclass(frozen=True)
class MLPSpec:
    """Fully-connected net. ``activation`` applies to hidden layers; when it
    is "sigmoid" the output layer is squashed too, keeping predictions in
    (0, 1) for dice-style losses."""

    layer_dims: tuple
    activation: str = "relu"
    kind: str = "mlp"

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", tuple(self.layer_dims))
        _require(self.kind == "mlp", "bad model kind")
        _require(len(self.layer_dims) >= 2, "mlp needs >= 2 layer dims")
        _require(all(isinstance(d, int) and d >= 1 for d in self.layer_dims),
                 "layer dims must be positive integers")
        _require(self.activation in HIDDEN_ACTIVATIONS,
                 f"activation must be one of {HIDDEN_ACTIVATIONS}")


ModelSpec = Union[LinearRegressionSpec, LogisticRegressionSpec, MLPSpec]

_MODEL_SPECS = {
    "linear_regression": LinearRegressionSpec,
    "logistic_regression": LogisticRegressionSpec,
    "mlp": MLPSpec,
}

PREPROCESSING_KINDS = ("standardize_columns", "minmax_columns", "select_columns")


@dataclass(frozen=True)
class PreprocessingStep:
    kind: str
    names: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        _require(self.kind in PREPROCESSING_KINDS,
                 f"unknown preprocessing step {self.kind!r}")
        if self.kind == "select_columns":
            _require(len(self.names) >= 1, "select_columns needs column names")
        else:
            _require(self.names == (), f"{self.kind} takes no column names")


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "sgd"
    uses_momentum: bool = False

    def __post_init__(self):
        _require(self.kind == "sgd", "only sgd is supported")
        _require(isinstance(self.uses_momentum, bool), "uses_momentum must be bool")


@dataclass(frozen=True)
class TrainingPlan:
    """Declarative, hash-identified description of what a node may run.

    Deliberately holds no tunable numeric hyperparameters: those belong to
    ``TrainingArgs`` and never affect the plan hash.
    """

    plan_name: str
    model_spec: ModelSpec
    optimizer_spec: OptimizerSpec
    loss_spec: LossKind
    preprocessing_spec: tuple = ()
    validation_metric: MetricKind = MetricKind.MSE

    def __post_init__(self):
        object.__setattr__(self, "preprocessing_spec", tuple(self.preprocessing_spec))
        object.__setattr__(self, "loss_spec", LossKind(self.loss_spec))
        object.__setattr__(self, "validation_metric", MetricKind(self.validation_metric))
        _require(isinstance(self.plan_name, str) and self.plan_name != "",
                 "plan_name must be a non-empty string")
        _require(isinstance(self.model_spec, (LinearRegressionSpec,
                                              LogisticRegressionSpec, MLPSpec)),
                 "model_spec must be a known model spec")
        _require(isinstance(self.optimizer_spec, OptimizerSpec),
                 "optimizer_spec must be an OptimizerSpec")
        _require(all(isinstance(s, PreprocessingStep) for s in self.preprocessing_spec),
                 "preprocessing_spec entries must be PreprocessingStep")

    def to_dict(self) -> dict:
        spec = self.model_spec
        model = {"kind": spec.kind}
        if spec.kind == "linear_regression":
            model["in_dim"] = spec.in_dim
        elif spec.kind == "logistic_regression":
            model["in_dim"] = spec.in_dim
            model["classes"] = spec.classes
        else:
            model["layer_dims"] = list(spec.layer_dims)
            model["activation"] = spec.activation
        steps = []
        for step in self.preprocessing_spec:
            entry = {"kind": step.kind}
            if step.kind == "select_columns":
                entry["names"] = list(step.names)
            steps.append(entry)
        return {
            "plan_name": self.plan_name,
            "model_spec": model,
            "optimizer_spec": {
                "kind": self.optimizer_spec.kind,
                "uses_momentum": self.optimizer_spec.uses_momentum,
            },
            "loss_spec": self.loss_spec.value,
            "preprocessing_spec": steps,
            "validation_metric": self.validation_metric.value,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainingPlan":
        try:
            raw_model = dict(data["model_spec"])
            kind = raw_model.pop("kind")
            model_cls = _MODEL_SPECS[kind]
            if kind == "mlp":
                raw_model["layer_dims"] = tuple(raw_model["layer_dims"])
            model = model_cls(**raw_model)
            steps = tuple(
                PreprocessingStep(kind=s["kind"], names=tuple(s.get("names", ())))
                for s in data["preprocessing_spec"]
            )
            return cls(
                plan_name=data["plan_name"],
                model_spec=model,
                optimizer_spec=OptimizerSpec(**data["optimizer_spec"]),
                loss_spec=LossKind(data["loss_spec"]),
                preprocessing_spec=steps,
                validation_metric=MetricKind(data["validation_metric"]),
            )
        except MalformedMessage:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedMessage(f"bad training plan: {exc}") from exc


def canonical_bytes(plan: TrainingPlan) -> bytes:
    """Deterministic UTF-8 rendering of a plan: sorted keys, no whitespace.

    Field insertion order never matters; preprocessing step order does
    (it is a JSON array).
    """
    return json.dumps(plan.to_dict(), sort_keys=True,
                      separators=(",", ":"), ensure_ascii=False).encode("utf-8")


@dataclass(frozen=True)
class PlanHash:
    digest: str
    algorithm: str = "sha256"

    def __post_init__(self):
        _require(self.algorithm == "sha256", "only sha256 is supported")
        _require(isinstance(self.digest, str) and len(self.digest) == 64
                 and all(c in "0123456789abcdef" for c in self.digest),
                 "digest must be 64 lowercase hex chars (32 bytes)")

    @property
    def digest_bytes(self) -> bytes:
        return bytes.fromhex(self.digest)


def compute_plan_hash(plan: TrainingPlan) -> PlanHash:
    return PlanHash(digest=hashlib.sha256(canonical_bytes(plan)).hexdigest())


@dataclass(frozen=True)
class TrainingArgs:
    """Tunable hyperparameters; adjustable between rounds, never hashed."""

    learning_rate: float
    batch_size: int
    num_local_updates: int
    rng_seed: int
    momentum: float = 0.0
    dropout_rate: float = 0.0
    validation_split_holdout_fraction: float = 0.1

    def __post_init__(self):
        _require(isinstance(self.learning_rate, (int, float)) and self.learning_rate > 0,
                 "learning_rate must be positive")
        _require(0.0 <= self.momentum < 1.0, "momentum must be in [0, 1)")
        _require(isinstance(self.batch_size, int) and self.batch_size >= 1,
                 "batch_size must be a positive integer")
        _require(isinstance(self.num_local_updates, int) and self.num_local_updates >= 1,
                 "num_local_updates must be a positive integer")
        _require(0.0 <= self.dropout_rate < 1.0, "dropout_rate must be in [0, 1)")
        _require(isinstance(self.rng_seed, int), "rng_seed must be an integer")
        _require(0.0 < self.validation_split_holdout_fraction < 1.0,
                 "validation_split_holdout_fraction must be in (0, 1)")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "batch_size": self.batch_size,
            "num_local_updates": self.num_local_updates,
            "dropout_rate": self.dropout_rate,
            "rng_seed": self.rng_seed,
            "validation_split_holdout_fraction": self.validation_split_holdout_fraction,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainingArgs":
        try:
            return cls(**{f.name: data[f.name] for f in fields(cls)})
        except (KeyError, TypeError) as exc:
            raise MalformedMessage(f"bad training args: {exc}") from exc


@dataclass(frozen=True)
class PrivacyConfig:
    """Per-step DP settings carried inside a train request."""

    clip_norm: float
    noise_multiplier: float
    delta: float

    def __post_init__(self):
        _require(self.clip_norm > 0, "clip_norm must be positive")
        _require(self.noise_multiplier >= 0, "noise_multiplier must be >= 0")
        _require(0.0 < self.delta < 1.0, "delta must be in (0, 1)")

    def to_dict(self) -> dict:
        return {"clip_norm": self.clip_norm,
                "noise_multiplier": self.noise_multiplier,
                "delta": self.delta}

    @classmethod
    def from_dict(cls, data: Mapping) -> "PrivacyConfig":
        try:
            return cls(clip_norm=data["clip_norm"],
                       noise_multiplier=data["noise_multiplier"],
                       delta=data["delta"])
        except (KeyError, TypeError) as exc:
            raise MalformedMessage(f"bad privacy config: {exc}") from exc


# --- message bodies ----------------------------------------------------------

@dataclass(frozen=True)
class RoundTiming:
    download_ms: float = 0.0
    preprocessing_ms: float = 0.0
    training_ms: float = 0.0
    upload_ms: float = 0.0

    def __post_init__(self):
        for name in ("download_ms", "preprocessing_ms", "training_ms", "upload_ms"):
            value = getattr(self, name)
            _require(isinstance(value, (int, float)) and math.isfinite(value)
                     and value >= 0, f"{name} must be finite and non-negative")

    def to_dict(self) -> dict:
        return {"download_ms": self.download_ms,
                "preprocessing_ms": self.preprocessing_ms,
                "training_ms": self.training_ms,
                "upload_ms": self.upload_ms}

    @classmethod
    def from_dict(cls, data: Mapping) -> "RoundTiming":
        try:
            return cls(**{f.name: data[f.name] for f in fields(cls)})
        except (KeyError, TypeError) as exc:
            raise MalformedMessage(f"bad round timing: {exc}") from exc

    def total_ms(self) -> float:
        return (self.download_ms + self.preprocessing_ms
                + self.training_ms + self.upload_ms)


@dataclass(frozen=True)
class SearchRequestBody:
    tags: tuple

    def __post_init__(self):
        object.__setattr__(self, "tags", tuple(self.tags))
        _require(len(self.tags) >= 1 and all(isinstance(t, str) and t for t in self.tags),
                 "tags must be a non-empty list of non-empty strings")

    def to_dict(self) -> dict:
        return {"tags": list(self.tags)}

    @classmethod
    def from_dict(cls, data):
        return cls(tags=tuple(_get(data, "tags", list)))


@dataclass(frozen=True)
class DatasetMatch:
    dataset_id: str
    display_name: str
    sample_count: int
    column_summary: Optional[tuple] = None

    def __post_init__(self):
        if self.column_summary is not None:
            object.__setattr__(self, "column_summary", tuple(self.column_summary))

    def to_dict(self) -> dict:
        return {"dataset_id": self.dataset_id,
                "display_name": self.display_name,
                "sample_count": self.sample_count,
                "column_summary": (None if self.column_summary is None
                                   else list(self.column_summary))}

    @classmethod
    def from_dict(cls, data):
        summary = data.get("column_summary")
        return cls(dataset_id=_get(data, "dataset_id", str),
                   display_name=_get(data, "display_name", str),
                   sample_count=_get(data, "sample_count", int),
                   column_summary=None if summary is None else tuple(summary))


@dataclass(frozen=True)
class SearchReplyBody:
    node_id: str
    matches: tuple

    def __post_init__(self):
        object.__setattr__(self, "matches", tuple(self.matches))

    def to_dict(self) -> dict:
        return {"node_id": self.node_id,
                "matches": [m.to_dict() for m in self.matches]}

    @classmethod
    def from_dict(cls, data):
        return cls(node_id=_get(data, "node_id", str),
                   matches=tuple(DatasetMatch.from_dict(m)
                                 for m in _get(data, "matches", list)))


@dataclass(frozen=True)
class TrainRequestBody:
    experiment_id: str
    round_index: int
    plan: TrainingPlan
    plan_hash: PlanHash
    training_args: TrainingArgs
    dataset_tags: tuple
    global_params_ref: str
    secagg_enabled: bool = False
    dp_config: Optional[PrivacyConfig] = None
    validate_only: bool = False

    def __post_init__(self):
        object.__setattr__(self, "dataset_tags", tuple(self.dataset_tags))
        _require(isinstance(self.round_index, int) and self.round_index >= 0,
                 "round_index must be a non-negative integer")
        _require(len(self.dataset_tags) >= 1, "dataset_tags must be non-empty")

    def hash_matches_plan(self) -> bool:
        return compute_plan_hash(self.plan) == self.plan_hash

    def to_dict(self) -> dict:
        return {
            "experiment_id": self.experiment_id,
            "round_index": self.round_index,
            "plan": self.plan.to_dict(),
            "plan_hash": {"algorithm": self.plan_hash.algorithm,
                          "digest": self.plan_hash.digest},
            "training_args": self.training_args.to_dict(),
            "dataset_tags": list(self.dataset_tags),
            "global_params_ref": self.global_params_ref,
            "secagg_enabled": self.secagg_enabled,
            "dp_config": None if self.dp_config is None else self.dp_config.to_dict(),
            "validate_only": self.validate_only,
        }

    @classmethod
    def from_dict(cls, data):
        raw_hash = _get(data, "plan_hash", dict)
        dp = data.get("dp_config")
        try:
            plan_hash = PlanHash(digest=raw_hash.get("digest", ""),
                                 algorithm=raw_hash.get("algorithm", "sha256"))
        except MalformedMessage as exc:
            raise MalformedMessage(f"bad plan hash: {exc}") from exc
        return cls(
            experiment_id=_get(data, "experiment_id", str),
            round_index=_get(data, "round_index", int),
            plan=TrainingPlan.from_dict(_get(data, "plan", dict)),
            plan_hash=plan_hash,
            training_args=TrainingArgs.from_dict(_get(data, "training_args", dict)),
            dataset_tags=tuple(_get(data, "dataset_tags", list)),
            global_params_ref=_get(data, "global_params_ref", str),
            secagg_enabled=bool(data.get("secagg_enabled", False)),
            dp_config=None if dp is None else PrivacyConfig.from_dict(dp),
            validate_only=bool(data.get("validate_only", False)),
        )


@dataclass(frozen=True)
class TrainReplyBody:
    experiment_id: str
    round_index: int
    node_id: str
    status: TrainStatus
    timing: RoundTiming = field(default_factory=RoundTiming)
    refusal_reason: Optional[str] = None
    local_params_ref: Optional[str] = None
    num_samples_trained: int = 0
    applied_overrides: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "status", TrainStatus(self.status))
        object.__setattr__(self, "applied_overrides", dict(self.applied_overrides))
        _require(self.num_samples_trained >= 0,
                 "num_samples_trained must be non-negative")
        if self.status is TrainStatus.SUCCESS:
            _require(self.local_params_ref is not None,
                     "success reply needs local_params_ref")
            _require(self.num_samples_trained > 0,
                     "success reply needs num_samples_trained > 0")

    def to_dict(self) -> dict:
        return {
            "experiment_id": self.experiment_id,
            "round_index": self.round_index,
            "node_id": self.node_id,
            "status": self.status.value,
            "refusal_reason": self.refusal_reason,
            "local_params_ref": self.local_params_ref,
            "num_samples_trained": self.num_samples_trained,
            "timing": self.timing.to_dict(),
            "applied_overrides": dict(self.applied_overrides),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            experiment_id=_get(data, "experiment_id", str),
            round_index=_get(data, "round_index", int),
            node_id=_get(data, "node_id", str),
            status=TrainStatus(_get(data, "status", str)),
            refusal_reason=data.get("refusal_reason"),
            local_params_ref=data.get("local_params_ref"),
            num_samples_trained=_get(data, "num_samples_trained", int),
            timing=RoundTiming.from_dict(_get(data, "timing", dict)),
            applied_overrides=dict(_get(data, "applied_overrides", dict)),
        )


@dataclass(frozen=True)
class ApprovalStatusRequestBody:
    plan: TrainingPlan
    plan_hash: PlanHash

    def to_dict(self) -> dict:
        return {"plan": self.plan.to_dict(),
                "plan_hash": {"algorithm": self.plan_hash.algorithm,
                              "digest": self.plan_hash.digest}}

    @classmethod
    def from_dict(cls, data):
        raw_hash = _get(data, "plan_hash", dict)
        return cls(plan=TrainingPlan.from_dict(_get(data, "plan", dict)),
                   plan_hash=PlanHash(digest=raw_hash.get("digest", ""),
                                      algorithm=raw_hash.get("algorithm", "sha256")))


@dataclass(frozen=True)
class ApprovalStatusReplyBody:
    node_id: str
    plan_hash: str
    status: str  # pending | approved | rejected | not_required

    def to_dict(self) -> dict:
        return {"node_id": self.node_id, "plan_hash": self.plan_hash,
                "status": self.status}

    @classmethod
    def from_dict(cls, data):
        return cls(node_id=_get(data, "node_id", str),
                   plan_hash=_get(data, "plan_hash", str),
                   status=_get(data, "status", str))


@dataclass(frozen=True)
class MonitorBody:
    experiment_id: str
    round_index: int
    node_id: str
    name: str
    value: float

    def to_dict(self) -> dict:
        return {"experiment_id": self.experiment_id,
                "round_index": self.round_index,
                "node_id": self.node_id,
                "name": self.name,
                "value": self.value}

    @classmethod
    def from_dict(cls, data):
        return cls(experiment_id=_get(data, "experiment_id", str),
                   round_index=_get(data, "round_index", int),
                   node_id=_get(data, "node_id", str),
                   name=_get(data, "name", str),
                   value=_get(data, "value", (int, float)))


@dataclass(frozen=True)
class ErrorBody:
    error_code: str
    message: str

    def to_dict(self) -> dict:
        return {"error_code": self.error_code, "message": self.message}

    @classmethod
    def from_dict(cls, data):
        return cls(error_code=_get(data, "error_code", str),
                   message=_get(data, "message", str))


@dataclass(frozen=True)
class PingBody:
    nonce: str = ""

    def to_dict(self) -> dict:
        return {"nonce": self.nonce}

    @classmethod
    def from_dict(cls, data):
        return cls(nonce=data.get("nonce", ""))


@dataclass(frozen=True)
class PongBody:
    nonce: str = ""

    def to_dict(self) -> dict:
        return {"nonce": self.nonce}

    @classmethod
    def from_dict(cls, data):
        return cls(nonce=data.get("nonce", ""))


_BODY_TYPES = {
    MessageKind.SEARCH_REQUEST: SearchRequestBody,
    MessageKind.SEARCH_REPLY: SearchReplyBody,
    MessageKind.TRAIN_REQUEST: TrainRequestBody,
    MessageKind.TRAIN_REPLY: TrainReplyBody,
    MessageKind.APPROVAL_STATUS_REQUEST: ApprovalStatusRequestBody,
    MessageKind.APPROVAL_STATUS_REPLY: ApprovalStatusReplyBody,
    MessageKind.MONITOR: MonitorBody,
    MessageKind.ERROR: ErrorBody,
    MessageKind.PING: PingBody,
    MessageKind.PONG: PongBody,
}


# --- envelope ----------------------------------------------------------------

def new_message_id() -> str:
    return uuid.uuid4().hex


@dataclass(frozen=True)
class MessageEnvelope:
    message_id: str
    sender_id: str
    topic: str
    kind: MessageKind
    timestamp: int
    payload: Any
    protocol_version: str = PROTOCOL_VERSION

    def __post_init__(self):
        object.__setattr__(self, "kind", MessageKind(self.kind))
        expected = _BODY_TYPES[self.kind]
        if not isinstance(self.payload, expected):
            raise KindMismatch(
                f"kind {self.kind.value} requires {expected.__name__}, "
                f"got {type(self.payload).__name__}")
        _require(isinstance(self.timestamp, int) and self.timestamp >= 0,
                 "timestamp must be UTC milliseconds")
        _require(bool(self.message_id), "message_id required")
        _require(bool(self.sender_id), "sender_id required")

    def to_dict(self) -> dict:
        return {
            "protocol_version": self.protocol_version,
            "message_id": self.message_id,
            "sender_id": self.sender_id,
            "topic": self.topic,
            "kind": self.kind.value,
            "timestamp": self.timestamp,
            "payload": self.payload.to_dict(),
        }


def make_envelope(sender_id: str, topic: str, payload, *, clock=None,
                  timestamp: Optional[int] = None) -> MessageEnvelope:
    """Build an envelope, inferring the kind from the payload type."""
    kind = next((k for k, t in _BODY_TYPES.items() if type(payload) is t), None)
    if kind is None:
        raise KindMismatch(f"no message kind for {type(payload).__name__}")
    if timestamp is None:
        timestamp = clock.now_ms() if clock is not None else 0
    return MessageEnvelope(message_id=new_message_id(), sender_id=sender_id,
                           topic=topic, kind=kind, timestamp=timestamp,
                           payload=payload)


def encode(envelope: MessageEnvelope) -> bytes:
    """Encode one envelope as a deterministic UTF-8 JSON document."""
    return json.dumps(envelope.to_dict(), sort_keys=True,
                      separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def decode(data: bytes) -> MessageEnvelope:
    """Parse and validate an encoded envelope.

    Raises MalformedMessage on syntax/structure problems, UnsupportedVersion
    on any protocol_version other than the supported one, KindMismatch when
    the payload does not satisfy the kind's schema, and HashMismatch when a
    train request's plan does not hash to its claimed plan hash.
    """
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedMessage(f"not a UTF-8 JSON document: {exc}") from exc
    if not isinstance(doc, dict):
        raise MalformedMessage("envelope must be a JSON object")
    version = doc.get("protocol_version")
    if version != PROTOCOL_VERSION:
        raise UnsupportedVersion(f"protocol_version {version!r} not supported")
    for name, typ in (("message_id", str), ("sender_id", str), ("topic", str),
                      ("kind", str), ("timestamp", int)):
        if not isinstance(doc.get(name), typ) or isinstance(doc.get(name), bool):
            raise MalformedMessage(f"missing or invalid field {name!r}")
    try:
        kind = MessageKind(doc["kind"])
    except ValueError as exc:
        raise MalformedMessage(f"unknown kind {doc['kind']!r}") from exc
    raw_payload = doc.get("payload")
    if not isinstance(raw_payload, dict):
        raise MalformedMessage("payload must be a JSON object")
    body_type = _BODY_TYPES[kind]
    try:
        payload = body_type.from_dict(raw_payload)
    except HashMismatch:
        raise
    except (MalformedMessage, TypeError, ValueError, AttributeError) as exc:
        raise KindMismatch(f"payload does not match kind {kind.value}: {exc}") from exc
    if isinstance(payload, TrainRequestBody) and not payload.hash_matches_plan():
        raise HashMismatch("plan bytes do not hash to the claimed plan_hash")
    return MessageEnvelope(
        message_id=doc["message_id"], sender_id=doc["sender_id"],
        topic=doc["topic"], kind=kind, timestamp=doc["timestamp"],
        payload=payload)
