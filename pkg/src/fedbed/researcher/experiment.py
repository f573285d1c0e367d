"""Experiment orchestration: the single control loop that owns state.

A round is: upload global params, broadcast the train request, collect
replies until the timeout (or until the whole federation answered), apply
the drop-out strategy, aggregate, advance. The strategy floor is hard:
fewer Success replies than min_nodes_per_round is always a RoundShortfall;
between the floor and the full federation, FailRound aborts while
ContinueWithResponders proceeds with whoever answered.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Optional

import numpy as np

from .. import protocol, secagg
from ..broker.client import BrokerClient
from ..broker.core import TOPIC_ALL_NODES, topic_for_researcher
from ..clock import SystemClock
from ..errors import (
    BlobTransferError,
    CohortIncomplete,
    ConfigError,
    FedbedError,
    MalformedMessage,
    NoNodesResponded,
    RoundInFlight,
    RoundShortfall,
)
from ..mlcore import deserialize_params, init_params, serialize_params
from ..mlcore.params import ParamVector
from ..util import derive_seed
from .aggregate import fedavg_aggregate

log = logging.getLogger(__name__)

ON_SHORTFALL_FAIL = "fail_round"
ON_SHORTFALL_CONTINUE = "continue_with_responders"

CHECKPOINT_FORMAT_VERSION = "1"


@dataclass(frozen=True)
class StrategyConfig:
    reply_timeout_ms: int = 30000
    min_nodes_per_round: int = 1
    on_shortfall: str = ON_SHORTFALL_CONTINUE

    def __post_init__(self):
        if self.reply_timeout_ms <= 0:
            raise ConfigError("reply_timeout_ms must be positive")
        if self.min_nodes_per_round < 1:
            raise ConfigError("min_nodes_per_round must be >= 1")
        if self.on_shortfall not in (ON_SHORTFALL_FAIL, ON_SHORTFALL_CONTINUE):
            raise ConfigError(f"unknown on_shortfall {self.on_shortfall!r}")

    def to_dict(self) -> dict:
        return {"reply_timeout_ms": self.reply_timeout_ms,
                "min_nodes_per_round": self.min_nodes_per_round,
                "on_shortfall": self.on_shortfall}


@dataclass(frozen=True)
class ExperimentConfig:
    experiment_id: str
    tags: tuple
    plan: protocol.TrainingPlan
    training_args: protocol.TrainingArgs
    rounds: int
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    aggregator: str = "fedavg"
    secagg_enabled: bool = False
    dp_config: Optional[protocol.PrivacyConfig] = None
    secagg_key_file: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "tags", tuple(self.tags))
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.aggregator != "fedavg":
            raise ConfigError("only the fedavg aggregator is supported")
        if self.secagg_enabled and not self.secagg_key_file:
            raise ConfigError("secagg_enabled needs secagg_key_file")

    def to_dict(self) -> dict:
        return {
            "experiment_id": self.experiment_id,
            "tags": list(self.tags),
            "plan": self.plan.to_dict(),
            "training_args": self.training_args.to_dict(),
            "rounds": self.rounds,
            "strategy": self.strategy.to_dict(),
            "aggregator": self.aggregator,
            "secagg_enabled": self.secagg_enabled,
            "dp_config": None if self.dp_config is None else self.dp_config.to_dict(),
            "secagg_key_file": self.secagg_key_file,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ExperimentConfig":
        try:
            dp = doc.get("dp_config")
            return cls(
                experiment_id=doc["experiment_id"],
                tags=tuple(doc["tags"]),
                plan=protocol.TrainingPlan.from_dict(doc["plan"]),
                training_args=protocol.TrainingArgs.from_dict(doc["training_args"]),
                rounds=int(doc["rounds"]),
                strategy=StrategyConfig(**doc.get("strategy", {})),
                aggregator=doc.get("aggregator", "fedavg"),
                secagg_enabled=bool(doc.get("secagg_enabled", False)),
                dp_config=(None if dp is None
                           else protocol.PrivacyConfig.from_dict(dp)),
                secagg_key_file=doc.get("secagg_key_file"),
            )
        except (KeyError, TypeError, ValueError, MalformedMessage) as exc:
            raise ConfigError(f"bad experiment config: {exc}") from exc


def load_experiment_config(path) -> ExperimentConfig:
    """Parse the flat config file (normative keys at the top level)."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    try:
        args = protocol.TrainingArgs(
            learning_rate=doc["learning_rate"],
            momentum=doc.get("momentum", 0.0),
            batch_size=doc["batch_size"],
            num_local_updates=doc["num_local_updates"],
            dropout_rate=doc.get("dropout_rate", 0.0),
            rng_seed=doc.get("rng_seed", 0),
            validation_split_holdout_fraction=doc.get(
                "validation_split_holdout_fraction", 0.1))
        strategy = StrategyConfig(
            reply_timeout_ms=doc.get("reply_timeout_ms", 30000),
            min_nodes_per_round=doc.get("min_nodes_per_round", 1),
            on_shortfall=doc.get("on_shortfall", ON_SHORTFALL_CONTINUE))
        dp = doc.get("dp_config")
        return ExperimentConfig(
            experiment_id=doc["experiment_id"],
            tags=tuple(doc["tags"]),
            plan=protocol.TrainingPlan.from_dict(doc["plan"]),
            training_args=args,
            rounds=int(doc["rounds"]),
            strategy=strategy,
            secagg_enabled=bool(doc.get("secagg_enabled", False)),
            dp_config=None if dp is None else protocol.PrivacyConfig.from_dict(dp),
            secagg_key_file=doc.get("secagg_key_file"),
        )
    except (KeyError, TypeError, ValueError, MalformedMessage) as exc:
        raise ConfigError(f"bad experiment config {path}: {exc}") from exc


@dataclass(frozen=True)
class FederatedDataset:
    """Per-node matched dataset metadata discovered by tag search."""

    nodes: Mapping[str, tuple]

    def __post_init__(self):
        object.__setattr__(self, "nodes",
                           {n: tuple(m) for n, m in self.nodes.items()})

    @property
    def node_ids(self) -> tuple:
        return tuple(sorted(self.nodes))

    def total_samples(self) -> int:
        return sum(m.sample_count for ms in self.nodes.values() for m in ms)


@dataclass(frozen=True)
class RoundRecord:
    round_index: int
    responders: tuple
    num_samples: Mapping[str, int]
    timings: Mapping[str, protocol.RoundTiming]
    validation: Mapping[str, Mapping[str, float]]
    aggregation_ms: float = 0.0
    researcher_wait_ms: float = 0.0
    blob_upload_ms: float = 0.0
    blob_download_ms: float = 0.0
    round_total_ms: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "responders", tuple(sorted(self.responders)))
        object.__setattr__(self, "num_samples", dict(self.num_samples))
        object.__setattr__(self, "timings", dict(self.timings))
        object.__setattr__(self, "validation",
                           {n: dict(v) for n, v in self.validation.items()})

    def to_dict(self) -> dict:
        return {
            "round_index": self.round_index,
            "responders": list(self.responders),
            "num_samples": {n: self.num_samples[n] for n in sorted(self.num_samples)},
            "timings": {n: self.timings[n].to_dict() for n in sorted(self.timings)},
            "validation": {n: self.validation[n] for n in sorted(self.validation)},
            "aggregation_ms": self.aggregation_ms,
            "researcher_wait_ms": self.researcher_wait_ms,
            "blob_upload_ms": self.blob_upload_ms,
            "blob_download_ms": self.blob_download_ms,
            "round_total_ms": self.round_total_ms,
        }

    @classmethod
    def from_dict(cls, doc) -> "RoundRecord":
        return cls(
            round_index=doc["round_index"],
            responders=tuple(doc["responders"]),
            num_samples=dict(doc["num_samples"]),
            timings={n: protocol.RoundTiming.from_dict(t)
                     for n, t in doc["timings"].items()},
            validation={n: dict(v) for n, v in doc["validation"].items()},
            aggregation_ms=doc.get("aggregation_ms", 0.0),
            researcher_wait_ms=doc.get("researcher_wait_ms", 0.0),
            blob_upload_ms=doc.get("blob_upload_ms", 0.0),
            blob_download_ms=doc.get("blob_download_ms", 0.0),
            round_total_ms=doc.get("round_total_ms", 0.0),
        )


@dataclass
class ExperimentState:
    config: ExperimentConfig
    round_index: int
    global_params: ParamVector
    history: list
    rng_state: dict

    def __post_init__(self):
        if self.round_index != len(self.history):
            raise ConfigError("round_index must equal the history length")


def fresh_state(config: ExperimentConfig) -> ExperimentState:
    seed = derive_seed(config.training_args.rng_seed, "init",
                       config.experiment_id)
    params = init_params(config.plan.model_spec, seed)
    rng = np.random.default_rng(seed)
    return ExperimentState(config=config, round_index=0, global_params=params,
                           history=[], rng_state=rng.bit_generator.state)


class Experiment:
    """Drives one federated experiment through a broker client."""

    def __init__(self, config_or_state, broker: BrokerClient,
                 researcher_id: str = "researcher", clock=None):
        if isinstance(config_or_state, ExperimentState):
            self.state = config_or_state
        else:
            self.state = fresh_state(config_or_state)
        self.broker = broker
        self.researcher_id = researcher_id
        self.clock = clock if clock is not None else SystemClock()
        self.federation: Optional[FederatedDataset] = None
        self.monitor_log: list = []
        self._round_in_flight = False
        self._topic = topic_for_researcher(researcher_id)
        self._sub = broker.subscribe(researcher_id, self._topic)
        if self.state.config.secagg_enabled:
            self._secagg_key = secagg.read_key_file(
                self.state.config.secagg_key_file)
        else:
            self._secagg_key = None

    @property
    def config(self) -> ExperimentConfig:
        return self.state.config

    def close(self) -> None:
        self._sub.close()

    # -- discovery and approval --

    def search_federation(self, timeout_ms: Optional[int] = None) -> FederatedDataset:
        """Broadcast a tag search and collect node replies until the timeout."""
        timeout_ms = timeout_ms or self.config.strategy.reply_timeout_ms
        self._broadcast(protocol.SearchRequestBody(tags=self.config.tags))
        replies = self._collect(protocol.MessageKind.SEARCH_REPLY,
                                timeout_ms, match=lambda p: True)
        nodes = {node_id: tuple(reply.matches)
                 for node_id, reply in replies.items() if reply.matches}
        if not nodes:
            raise NoNodesResponded(
                f"no node offered datasets tagged {list(self.config.tags)}")
        self.federation = FederatedDataset(nodes=nodes)
        return self.federation

    def request_approvals(self, timeout_ms: Optional[int] = None) -> dict:
        """Submit the plan for review everywhere; returns node -> status."""
        timeout_ms = timeout_ms or self.config.strategy.reply_timeout_ms
        plan_hash = protocol.compute_plan_hash(self.config.plan)
        self._broadcast(protocol.ApprovalStatusRequestBody(
            plan=self.config.plan, plan_hash=plan_hash))
        replies = self._collect(
            protocol.MessageKind.APPROVAL_STATUS_REPLY, timeout_ms,
            match=lambda p: p.plan_hash == plan_hash.digest,
            expected=set(self.federation.node_ids) if self.federation else None)
        return {node: reply.status for node, reply in replies.items()}

    # -- the round loop --

    def run_round(self) -> RoundRecord:
        """Execute one full round; state advances only on success."""
        if self._round_in_flight:
            raise RoundInFlight("a round is already in flight")
        if self.federation is None:
            raise NoNodesResponded("search_federation must succeed first")
        self._round_in_flight = True
        try:
            return self._run_round()
        finally:
            self._round_in_flight = False

    def _run_round(self) -> RoundRecord:
        state = self.state
        config = state.config
        clock = self.clock
        round_start = clock.monotonic_ms()

        t0 = clock.monotonic_ms()
        try:
            global_ref = self.broker.upload_blob(
                serialize_params(state.global_params))
        except FedbedError as exc:
            raise BlobTransferError(f"global upload failed: {exc.message}") from exc
        blob_upload_ms = clock.monotonic_ms() - t0

        body = protocol.TrainRequestBody(
            experiment_id=config.experiment_id,
            round_index=state.round_index,
            plan=config.plan,
            plan_hash=protocol.compute_plan_hash(config.plan),
            training_args=config.training_args,
            dataset_tags=config.tags,
            global_params_ref=global_ref,
            secagg_enabled=config.secagg_enabled,
            dp_config=config.dp_config)
        self._broadcast(body)

        t0 = clock.monotonic_ms()
        replies = self._collect(
            protocol.MessageKind.TRAIN_REPLY,
            config.strategy.reply_timeout_ms,
            match=lambda p: (p.experiment_id == config.experiment_id
                             and p.round_index == state.round_index
                             and not p.applied_overrides.get("validate_only")),
            expected=set(self.federation.node_ids))
        researcher_wait_ms = clock.monotonic_ms() - t0

        success = {n: r for n, r in replies.items()
                   if r.status is protocol.TrainStatus.SUCCESS}
        refused = {n: r.refusal_reason for n, r in replies.items()
                   if r.status is not protocol.TrainStatus.SUCCESS}
        if refused:
            log.info("round %d: non-success replies: %s",
                     state.round_index, refused)
        strategy = config.strategy
        if len(success) < strategy.min_nodes_per_round:
            raise RoundShortfall(
                f"round {state.round_index}: {len(success)} success replies "
                f"< min_nodes_per_round {strategy.min_nodes_per_round}")
        if (strategy.on_shortfall == ON_SHORTFALL_FAIL
                and len(success) < len(self.federation.node_ids)):
            raise RoundShortfall(
                f"round {state.round_index}: {len(success)} of "
                f"{len(self.federation.node_ids)} nodes responded and the "
                f"strategy fails the round on any drop-out")

        t0 = clock.monotonic_ms()
        if config.secagg_enabled:
            new_params, blob_download_ms, aggregation_ms = \
                self._secagg_aggregate(success, t0)
        else:
            updates = []
            for node_id in sorted(success):
                reply = success[node_id]
                try:
                    blob = self.broker.download_blob(reply.local_params_ref)
                except FedbedError as exc:
                    raise BlobTransferError(
                        f"update from {node_id} unavailable: {exc.message}"
                    ) from exc
                updates.append((deserialize_params(blob),
                                reply.num_samples_trained))
            blob_download_ms = clock.monotonic_ms() - t0
            t0 = clock.monotonic_ms()
            new_params = fedavg_aggregate(updates)
            aggregation_ms = clock.monotonic_ms() - t0

        record = RoundRecord(
            round_index=state.round_index,
            responders=tuple(sorted(success)),
            num_samples={n: success[n].num_samples_trained for n in success},
            timings={n: success[n].timing for n in success},
            validation={n: _validation_view(success[n].applied_overrides)
                        for n in success},
            aggregation_ms=aggregation_ms,
            researcher_wait_ms=researcher_wait_ms,
            blob_upload_ms=blob_upload_ms,
            blob_download_ms=blob_download_ms,
            round_total_ms=clock.monotonic_ms() - round_start)
        state.global_params = new_params
        state.history.append(record)
        state.round_index += 1
        return record

    def _secagg_aggregate(self, success: dict, t0: float) -> tuple:
        """Decrypt the cohort sums; any missing keyed node is unrecoverable."""
        key = self._secagg_key
        cohort = set(key.cohort)
        if set(success) != cohort:
            raise CohortIncomplete(
                f"secagg cohort {sorted(cohort)} but responders "
                f"{sorted(success)}; the aggregate cannot be decrypted")
        clock = self.clock
        docs = []
        for node_id in sorted(success):
            try:
                raw = self.broker.download_blob(success[node_id].local_params_ref)
            except FedbedError as exc:
                raise BlobTransferError(
                    f"ciphertext from {node_id} unavailable: {exc.message}"
                ) from exc
            docs.append(json.loads(raw.decode("utf-8")))
        blob_download_ms = clock.monotonic_ms() - t0
        t0 = clock.monotonic_ms()
        state = self.state
        params_tag = secagg.round_tag(state.config.experiment_id,
                                      state.round_index, "params")
        weights_tag = secagg.round_tag(state.config.experiment_id,
                                       state.round_index, "weights")
        params_cts = [secagg.Ciphertext.from_dict(d["params_ct"]) for d in docs]
        weight_cts = [secagg.Ciphertext.from_dict(d["weights_ct"]) for d in docs]
        scheme = secagg.QuantizationScheme(**docs[0]["quantization"])
        n = len(docs)
        weight_sum = secagg.aggregate_decrypt(
            weight_cts, key.secret, weights_tag, n, key.modulus, len(cohort),
            max_plaintext=1 << 32)[0]
        if weight_sum <= 0:
            raise CohortIncomplete("decrypted total sample count is zero")
        sums = secagg.aggregate_decrypt(
            params_cts, key.secret, params_tag, n, key.modulus, len(cohort),
            max_plaintext=weight_sum * scheme.levels)
        mean_q = np.asarray([s / weight_sum for s in sums], dtype=np.float64)
        flat = mean_q / scheme.levels * (2.0 * scheme.clip_range) \
            - scheme.clip_range
        layout = self.state.global_params.layout()
        new_params = ParamVector.from_flat(layout, flat)
        aggregation_ms = clock.monotonic_ms() - t0
        return new_params, blob_download_ms, aggregation_ms

    # -- interactivity --

    def update_training_args(self, new_args: protocol.TrainingArgs) -> None:
        """Swap hyperparameters between rounds; the plan hash is untouched."""
        if self._round_in_flight:
            raise RoundInFlight("cannot change args during a round")
        self.state.config = replace(self.state.config, training_args=new_args)

    def validate(self, timeout_ms: Optional[int] = None) -> dict:
        """Holdout metrics on the current global params (zero updates)."""
        if self._round_in_flight:
            raise RoundInFlight("cannot validate during a round")
        if self.federation is None:
            raise NoNodesResponded("search_federation must succeed first")
        config = self.state.config
        global_ref = self.broker.upload_blob(
            serialize_params(self.state.global_params))
        body = protocol.TrainRequestBody(
            experiment_id=config.experiment_id,
            round_index=self.state.round_index,
            plan=config.plan,
            plan_hash=protocol.compute_plan_hash(config.plan),
            training_args=config.training_args,
            dataset_tags=config.tags,
            global_params_ref=global_ref,
            secagg_enabled=False,
            dp_config=None,
            validate_only=True)
        self._broadcast(body)
        replies = self._collect(
            protocol.MessageKind.TRAIN_REPLY,
            timeout_ms or config.strategy.reply_timeout_ms,
            match=lambda p: (p.experiment_id == config.experiment_id
                             and p.round_index == self.state.round_index
                             and p.applied_overrides.get("validate_only")),
            expected=set(self.federation.node_ids))
        return {n: _validation_view(r.applied_overrides)
                for n, r in replies.items()
                if r.status is protocol.TrainStatus.SUCCESS}

    def run(self, checkpoint_path=None, metrics_path=None,
            on_round: Optional[Callable] = None) -> ExperimentState:
        """Run the remaining configured rounds, checkpointing after each."""
        from .checkpoint import save_checkpoint
        from .metrics import emit_metrics
        if self.federation is None:
            self.search_federation()
        while self.state.round_index < self.config.rounds:
            record = self.run_round()
            if checkpoint_path is not None:
                save_checkpoint(self.state, checkpoint_path)
            if metrics_path is not None:
                emit_metrics(self.state, metrics_path)
            if on_round is not None:
                on_round(record)
        return self.state

    # -- plumbing --

    def _broadcast(self, payload) -> None:
        envelope = protocol.make_envelope(self.researcher_id, TOPIC_ALL_NODES,
                                          payload, clock=self.clock)
        self.broker.publish(TOPIC_ALL_NODES, envelope)

    def _collect(self, kind: protocol.MessageKind, timeout_ms: int,
                 match: Callable, expected: Optional[set] = None) -> dict:
        """Gather one payload per node until the deadline, or until every
        expected node has answered. Loop deadlines use real time; reported
        durations come from the injected clock."""
        deadline = time.monotonic() + timeout_ms / 1000.0
        found: dict = {}
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                break
            data = self._sub.get(timeout=min(0.2, remaining))
            if data is None:
                continue
            try:
                envelope = protocol.decode(data)
            except FedbedError as exc:
                log.warning("dropping undecodable reply: %s", exc.message)
                continue
            if envelope.kind is protocol.MessageKind.MONITOR:
                self.monitor_log.append(envelope.payload)
                continue
            if envelope.kind is not kind:
                continue
            payload = envelope.payload
            node_id = getattr(payload, "node_id", envelope.sender_id)
            if not match(payload) or node_id in found:
                continue
            found[node_id] = payload
            if expected is not None and expected.issubset(found):
                break
        return found


def _validation_view(overrides: Mapping) -> dict:
    view = {}
    for key in ("train_loss", "holdout_loss", "holdout_metric", "dp_epsilon"):
        if key in overrides:
            view[key] = overrides[key]
    return view
