"""A self-contained desk-scale federation: broker, three nodes, researcher.

Synthetic site sizes default to 147/21/25 samples so the demo exercises the
same unbalanced-weight arithmetic as a realistic three-hospital deployment.
Used by ``fedbed-researcher demo`` and by the acceptance suite.
"""

from __future__ import annotations

import csv
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import protocol
from .broker.client import LocalBroker, TcpBrokerClient
from .broker.service import BrokerService
from .clock import SystemClock
from .node.approval import STATUS_APPROVED
from .node.config import NodeConfig
from .node.daemon import NodeDaemon
from .node.executor import NodePolicy
from .researcher.experiment import (
    Experiment,
    ExperimentConfig,
    StrategyConfig,
)

DEMO_TAGS = ("demo", "synthetic")
DEMO_SITE_SIZES = (147, 21, 25)
DEMO_FEATURES = 5


def synth_linear_table(n: int, d: int, seed: int, noise_std: float = 0.05,
                       w_star: Optional[np.ndarray] = None) -> tuple:
    """Columns and float rows for a noisy linear target."""
    rng = np.random.default_rng(seed)
    if w_star is None:
        w_star = np.linspace(1.0, 2.0, d)
    x = rng.normal(0.0, 1.0, size=(n, d))
    y = x @ w_star + 0.5 + rng.normal(0.0, noise_std, size=n)
    columns = [f"x{j}" for j in range(d)] + ["y"]
    rows = np.column_stack([x, y])
    return columns, rows


def synth_logistic_table(n: int, d: int, seed: int,
                         w_star: Optional[np.ndarray] = None) -> tuple:
    """Columns and float rows for a two-class classification target."""
    rng = np.random.default_rng(seed)
    if w_star is None:
        w_star = np.linspace(-1.5, 1.5, d)
    x = rng.normal(0.0, 1.0, size=(n, d))
    logits = x @ w_star
    probs = 1.0 / (1.0 + np.exp(-logits))
    y = (rng.random(n) < probs).astype(np.float64)
    columns = [f"x{j}" for j in range(d)] + ["y"]
    rows = np.column_stack([x, y])
    return columns, rows


def write_csv(path, columns: Sequence[str], rows: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in np.asarray(rows):
            writer.writerow([repr(float(v)) for v in row])
    return path


def demo_plan(d: int = DEMO_FEATURES) -> protocol.TrainingPlan:
    return protocol.TrainingPlan(
        plan_name="demo-linear",
        model_spec=protocol.LinearRegressionSpec(in_dim=d),
        optimizer_spec=protocol.OptimizerSpec(uses_momentum=False),
        loss_spec=protocol.LossKind.MSE,
        preprocessing_spec=(),
        validation_metric=protocol.MetricKind.MSE)


@dataclass
class Federation:
    """Running demo stack plus the handles tests need to poke it."""

    workdir: Path
    nodes: list
    node_clients: list
    researcher_client: object
    experiment: Experiment
    broker_service: Optional[BrokerService] = None
    local_broker: Optional[LocalBroker] = None
    extra_clients: list = field(default_factory=list)

    @property
    def node_ids(self) -> list:
        return [daemon.config.node_id for daemon in self.nodes]

    def close(self) -> None:
        self.experiment.close()
        for daemon in self.nodes:
            daemon.stop()
        for client in [*self.node_clients, self.researcher_client,
                       *self.extra_clients]:
            client.close()
        if self.broker_service is not None:
            self.broker_service.stop()


def build_federation(workdir, *, rounds: int = 5,
                     site_sizes: Sequence[int] = DEMO_SITE_SIZES,
                     seed: int = 7, transport: str = "local",
                     reply_timeout_ms: int = 10000,
                     min_nodes_per_round: int = 3,
                     on_shortfall: str = "continue_with_responders",
                     policy: Optional[NodePolicy] = None,
                     plan: Optional[protocol.TrainingPlan] = None,
                     training_args: Optional[protocol.TrainingArgs] = None,
                     tables: Optional[list] = None,
                     dp_config=None, secagg_key_dir=None,
                     clock=None, node_clock=None, approve: bool = True,
                     admin_ports: bool = False,
                     experiment_id: str = "demo-exp",
                     hooks=None, fault_injectors=None) -> Federation:
    """Assemble broker + nodes + researcher. Callers own the lifecycle."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    clock = clock if clock is not None else SystemClock()
    node_clock = node_clock if node_clock is not None else clock
    policy = policy if policy is not None else NodePolicy(
        min_samples_for_training=10, max_batch_size=4096,
        max_num_local_updates=1000, approval_required=True)
    plan = plan if plan is not None else demo_plan()
    training_args = training_args if training_args is not None else \
        protocol.TrainingArgs(learning_rate=0.05, momentum=0.0, batch_size=4096,
                              num_local_updates=1, dropout_rate=0.0,
                              rng_seed=seed,
                              validation_split_holdout_fraction=0.1)

    broker_service = None
    local_broker = None
    if transport == "tcp":
        broker_service = BrokerService(workdir / "broker-store",
                                       ctrl_port=0, blob_port=0)
        broker_service.start()

        def make_client():
            return TcpBrokerClient("127.0.0.1", broker_service.ctrl_port,
                                   broker_service.blob_port)
    else:
        local_broker = LocalBroker(workdir / "broker-store")

        def make_client():
            return local_broker.make_client()

    node_ids = [f"node-{i + 1}" for i in range(len(site_sizes))]
    secagg_files = {}
    if secagg_key_dir is not None:
        from . import secagg as secagg_mod
        material = secagg_mod.keygen(node_ids, modulus_bits=256, seed=seed)
        secagg_mod.write_key_files(material, secagg_key_dir)
        for node_id in node_ids:
            secagg_files[node_id] = str(
                Path(secagg_key_dir) / f"secagg_node_{node_id}.json")

    nodes = []
    node_clients = []
    for i, (node_id, n) in enumerate(zip(node_ids, site_sizes)):
        if tables is not None:
            columns, rows = tables[i]
        else:
            columns, rows = synth_linear_table(n, DEMO_FEATURES,
                                               seed=seed * 1000 + i)
        csv_path = write_csv(workdir / "data" / f"{node_id}.csv", columns, rows)
        config = NodeConfig(
            node_id=node_id, store_dir=str(workdir / "stores" / node_id),
            admin_port=0 if admin_ports else None,
            policy=policy, secagg_key_file=secagg_files.get(node_id))
        client = make_client()
        daemon = NodeDaemon(config, client, clock=node_clock,
                            hooks=(hooks or {}).get(node_id) if isinstance(hooks, dict) else hooks,
                            fault_injector=(fault_injectors or {}).get(node_id))
        daemon.registry.register_dataset(
            display_name=f"{node_id} synthetic", tags=DEMO_TAGS,
            data_type="tabular", path=str(csv_path),
            dataset_id=f"{node_id}-data", target_column="y")
        daemon.start()
        nodes.append(daemon)
        node_clients.append(client)

    if approve:
        for daemon in nodes:
            record = daemon.approvals.ensure_pending(plan)
            if record.status != STATUS_APPROVED:
                daemon.approvals.review(record.plan_hash, STATUS_APPROVED,
                                        "demo auto-approval")

    exp_config = ExperimentConfig(
        experiment_id=experiment_id, tags=DEMO_TAGS, plan=plan,
        training_args=training_args, rounds=rounds,
        strategy=StrategyConfig(reply_timeout_ms=reply_timeout_ms,
                                min_nodes_per_round=min_nodes_per_round,
                                on_shortfall=on_shortfall),
        secagg_enabled=secagg_key_dir is not None,
        dp_config=dp_config,
        secagg_key_file=(str(Path(secagg_key_dir) / "secagg_researcher.json")
                         if secagg_key_dir is not None else None))
    researcher_client = make_client()
    experiment = Experiment(exp_config, researcher_client, clock=clock)
    return Federation(workdir=workdir, nodes=nodes, node_clients=node_clients,
                      researcher_client=researcher_client,
                      experiment=experiment, broker_service=broker_service,
                      local_broker=local_broker)


def run_demo(workdir, *, rounds: int = 5, transport: str = "tcp",
             seed: int = 7, search_timeout_ms: int = 1500,
             reply_timeout_ms: int = 20000, clean: bool = True) -> dict:
    """Run the full demo experiment; returns state, report, and paths."""
    from .researcher.metrics import runtime_report

    workdir = Path(workdir)
    if clean and workdir.exists():
        shutil.rmtree(workdir)
    fed = build_federation(workdir, rounds=rounds, seed=seed,
                           transport=transport,
                           reply_timeout_ms=reply_timeout_ms)
    checkpoint_path = workdir / "checkpoint.json"
    metrics_path = workdir / "metrics.jsonl"
    try:
        fed.experiment.search_federation(timeout_ms=search_timeout_ms)
        statuses = fed.experiment.request_approvals(timeout_ms=search_timeout_ms)
        state = fed.experiment.run(checkpoint_path=checkpoint_path,
                                   metrics_path=metrics_path)
        report = runtime_report(state)
        return {
            "state": state,
            "report": report,
            "approvals": statuses,
            "checkpoint_path": checkpoint_path,
            "metrics_path": metrics_path,
        }
    finally:
        fed.close()
