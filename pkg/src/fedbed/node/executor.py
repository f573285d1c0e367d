"""One federated training round on the node side.

Order of operations is fixed: plan-hash and approval checks come before
anything touches data, policy clamps are recorded as applied overrides, and
the update loop honours the stop signal at update boundaries. With DP on,
each step runs clip -> noise -> sgd_step; with secagg on, the update is
encrypted before upload so only the cohort sum is recoverable.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .. import privacy, secagg
from ..broker.client import BrokerClient
from ..clock import SystemClock
from ..errors import (
    FedbedError,
    HashMismatch,
    MalformedMessage,
    NoMatchingDataset,
    PlanNotApproved,
    PolicyRefusal,
    TaskStopped,
    TrainingFailure,
)
from ..mlcore import (
    ModelInstance,
    deserialize_params,
    forward,
    gradient,
    iterate_batches,
    loss as compute_loss,
    metric_value,
    serialize_params,
    sgd_step,
    split_holdout,
)
from ..mlcore.data import apply_preprocessing
from ..protocol import (
    RoundTiming,
    TrainReplyBody,
    TrainRequestBody,
    TrainStatus,
    compute_plan_hash,
)
from ..util import derive_seed
from .approval import STATUS_APPROVED
from .registry import DatasetRegistry

CIPHERTEXT_FORMAT_VERSION = "1"


@dataclass(frozen=True)
class NodePolicy:
    """Node-sovereign limits applied to every train request."""

    min_samples_for_training: int = 0
    max_batch_size: int = 65536
    max_num_local_updates: int = 10000
    approval_required: bool = True

    def __post_init__(self):
        if self.min_samples_for_training < 0:
            raise MalformedMessage("min_samples_for_training must be >= 0")
        if self.max_batch_size < 1 or self.max_num_local_updates < 1:
            raise MalformedMessage("policy maxima must be positive")

    def to_dict(self) -> dict:
        return {"min_samples_for_training": self.min_samples_for_training,
                "max_batch_size": self.max_batch_size,
                "max_num_local_updates": self.max_num_local_updates,
                "approval_required": self.approval_required}

    @classmethod
    def from_dict(cls, data) -> "NodePolicy":
        return cls(**{k: data[k] for k in
                      ("min_samples_for_training", "max_batch_size",
                       "max_num_local_updates", "approval_required")
                      if k in data})


@dataclass
class ExecutionContext:
    node_id: str
    registry: DatasetRegistry
    approvals: object  # ApprovalLedger
    policy: NodePolicy
    broker: BrokerClient
    clock: object = field(default_factory=SystemClock)
    secagg_key: Optional[secagg.KeyFile] = None
    tag_ledger: secagg.TagLedger = field(default_factory=secagg.TagLedger)
    stop_event: threading.Event = field(default_factory=threading.Event)
    hooks: Optional[Callable[[str, dict], None]] = None

    def fire(self, event: str, **info) -> None:
        if self.hooks is not None:
            self.hooks(event, info)


def execute_train_task(ctx: ExecutionContext, body: TrainRequestBody) -> TrainReplyBody:
    """Run one round; refusals and failures come back as replies, not raises.

    TaskStopped propagates so the caller can mark the task Stopped; any
    other exception from inside is folded into an Error reply.
    """
    try:
        return _execute(ctx, body)
    except TaskStopped:
        raise
    except FedbedError as exc:
        status = (TrainStatus.REFUSED
                  if isinstance(exc, (HashMismatch, PlanNotApproved,
                                      NoMatchingDataset, PolicyRefusal))
                  else TrainStatus.ERROR)
        return _non_success_reply(ctx, body, status, f"{exc.code}: {exc.message}")


def _non_success_reply(ctx, body, status, reason) -> TrainReplyBody:
    return TrainReplyBody(
        experiment_id=body.experiment_id, round_index=body.round_index,
        node_id=ctx.node_id, status=status, refusal_reason=reason,
        timing=RoundTiming())


def _execute(ctx: ExecutionContext, body: TrainRequestBody) -> TrainReplyBody:
    clock = ctx.clock
    args = body.training_args
    overrides: dict = {}

    # 1. plan integrity, then the approval ledger
    if compute_plan_hash(body.plan) != body.plan_hash:
        raise HashMismatch("plan bytes do not hash to the claimed plan_hash")
    if ctx.policy.approval_required:
        record = ctx.approvals.ensure_pending(body.plan)
        if record.status != STATUS_APPROVED:
            raise PlanNotApproved(
                f"plan {body.plan_hash.digest[:12]} is {record.status}")

    # 2. resolve datasets by tags
    matches = ctx.registry.search(body.dataset_tags)
    if not matches:
        raise NoMatchingDataset(f"no dataset tagged {list(body.dataset_tags)}")
    dataset_id = min(m.dataset_id for m in matches)
    record = ctx.registry.get(dataset_id)

    # 3. node policy: refuse on minimum size, clamp the rest
    if record.sample_count < ctx.policy.min_samples_for_training:
        raise PolicyRefusal(
            f"dataset has {record.sample_count} samples; node requires at "
            f"least {ctx.policy.min_samples_for_training}")
    batch_size = args.batch_size
    if batch_size > ctx.policy.max_batch_size:
        batch_size = ctx.policy.max_batch_size
        overrides["batch_size"] = batch_size
    num_updates = args.num_local_updates
    if num_updates > ctx.policy.max_num_local_updates:
        num_updates = ctx.policy.max_num_local_updates
        overrides["num_local_updates"] = num_updates

    # 4. download global parameters
    t0 = clock.monotonic_ms()
    try:
        global_params = deserialize_params(
            ctx.broker.download_blob(body.global_params_ref))
    except FedbedError as exc:
        raise TrainingFailure(f"global params unavailable: {exc.message}") from exc
    download_ms = clock.monotonic_ms() - t0

    # 5. load data through the loading plan, apply plan preprocessing, split
    t0 = clock.monotonic_ms()
    dataset = ctx.registry.load_presented(dataset_id)
    dataset = apply_preprocessing(dataset, body.plan.preprocessing_spec)
    train_set, holdout_set = split_holdout(
        dataset, args.validation_split_holdout_fraction,
        derive_seed(args.rng_seed, "holdout", dataset_id))
    preprocessing_ms = clock.monotonic_ms() - t0

    x_train, y_train = train_set.features_and_target()
    x_hold, y_hold = holdout_set.features_and_target()
    n_train = x_train.shape[0]

    model = ModelInstance(spec=body.plan.model_spec, params=global_params,
                          dropout_rate=args.dropout_rate)

    if body.validate_only:
        metrics = _holdout_metrics(model, body, x_hold, y_hold)
        overrides.update(metrics)
        overrides["validate_only"] = True
        return TrainReplyBody(
            experiment_id=body.experiment_id, round_index=body.round_index,
            node_id=ctx.node_id, status=TrainStatus.SUCCESS,
            local_params_ref=body.global_params_ref,
            num_samples_trained=len(holdout_set),
            timing=RoundTiming(download_ms=download_ms,
                               preprocessing_ms=preprocessing_ms),
            applied_overrides=overrides)

    # 6.-7. local updates, with per-step DP when configured
    t0 = clock.monotonic_ms()
    params = global_params
    velocity = global_params.zeros_like()
    momentum = args.momentum if body.plan.optimizer_spec.uses_momentum else 0.0
    dropout_rng = np.random.default_rng(
        derive_seed(args.rng_seed, "dropout", body.round_index, dataset_id))
    dp_rng = np.random.default_rng(
        derive_seed(args.rng_seed, "dp", body.round_index, ctx.node_id))
    ledger = (privacy.PrivacyLedger(config=body.dp_config)
              if body.dp_config is not None else None)
    batch_seed = derive_seed(args.rng_seed, "batches", body.round_index, dataset_id)
    steps_done = 0
    try:
        for batch_idx in iterate_batches(n_train, batch_size, num_updates,
                                         batch_seed):
            if ctx.stop_event.is_set():
                raise TaskStopped("stopped by node operator")
            xb, yb = x_train[batch_idx], y_train[batch_idx]
            model = model.with_params(params)
            grad = gradient(model, (xb, yb), body.plan.loss_spec,
                            training_mode=True, rng=dropout_rng)
            ctx.fire("gradient", step=steps_done)
            if ledger is not None:
                grad = privacy.clip_gradient(grad, body.dp_config.clip_norm)
                ctx.fire("clip", step=steps_done)
                grad = privacy.noise_gradient(grad, body.dp_config.noise_multiplier,
                                              body.dp_config.clip_norm, dp_rng)
                ctx.fire("noise", step=steps_done)
                ledger = privacy.account(ledger)
            params, velocity = sgd_step(params, grad, velocity,
                                        args.learning_rate, momentum)
            steps_done += 1
            ctx.fire("train_step", step=steps_done)
    except TaskStopped:
        raise
    except FedbedError as exc:
        raise TrainingFailure(f"update {steps_done}: {exc.message}") from exc
    training_ms = clock.monotonic_ms() - t0

    model = model.with_params(params)
    train_loss = float(compute_loss(forward(model, x_train), y_train,
                                    body.plan.loss_spec))
    overrides.update(_holdout_metrics(model, body, x_hold, y_hold))
    overrides["train_loss"] = train_loss
    if ledger is not None:
        overrides["dp_epsilon"] = (ledger.reported_epsilon
                                   if np.isfinite(ledger.reported_epsilon)
                                   else "inf")

    # 8.-9. encrypt when secagg is on, upload, reply
    t0 = clock.monotonic_ms()
    if body.secagg_enabled:
        blob = _encrypt_update(ctx, body, params, n_train, overrides)
    else:
        blob = serialize_params(params)
    try:
        local_ref = ctx.broker.upload_blob(blob)
    except FedbedError as exc:
        raise TrainingFailure(f"upload failed: {exc.message}") from exc
    upload_ms = clock.monotonic_ms() - t0

    return TrainReplyBody(
        experiment_id=body.experiment_id, round_index=body.round_index,
        node_id=ctx.node_id, status=TrainStatus.SUCCESS,
        local_params_ref=local_ref, num_samples_trained=n_train,
        timing=RoundTiming(download_ms=download_ms,
                           preprocessing_ms=preprocessing_ms,
                           training_ms=training_ms, upload_ms=upload_ms),
        applied_overrides=overrides)


def _holdout_metrics(model: ModelInstance, body: TrainRequestBody,
                     x_hold, y_hold) -> dict:
    predictions = forward(model, x_hold)
    return {
        "holdout_loss": float(compute_loss(predictions, y_hold,
                                           body.plan.loss_spec)),
        "holdout_metric": float(metric_value(body.plan.validation_metric,
                                             predictions, y_hold)),
    }


def _encrypt_update(ctx: ExecutionContext, body: TrainRequestBody, params,
                    n_train: int, overrides: dict) -> bytes:
    """Weighted-FedAvg secagg: ship Enc(n * quantized params) and Enc(n)."""
    key = ctx.secagg_key
    if key is None:
        raise TrainingFailure("secagg requested but node holds no key file")
    scheme = secagg.QuantizationScheme()
    quantized, clip_count = secagg.quantize(params, scheme)
    weighted = [n_train * q for q in quantized]
    params_tag = secagg.round_tag(body.experiment_id, body.round_index, "params")
    weights_tag = secagg.round_tag(body.experiment_id, body.round_index, "weights")
    ct_params = secagg.encrypt_once(ctx.tag_ledger, weighted, key.secret,
                                    params_tag, key.modulus)
    ct_weights = secagg.encrypt_once(ctx.tag_ledger, [n_train], key.secret,
                                     weights_tag, key.modulus)
    overrides["secagg_clip_count"] = clip_count
    doc = {
        "format_version": CIPHERTEXT_FORMAT_VERSION,
        "params_ct": ct_params.to_dict(),
        "weights_ct": ct_weights.to_dict(),
        "layout": [[name, list(shape)] for name, shape in params.layout()],
        "quantization": {"clip_range": scheme.clip_range, "bits": scheme.bits},
    }
    return json.dumps(doc, separators=(",", ":")).encode("utf-8")
