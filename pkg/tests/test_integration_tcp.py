"""Cross-component integration over real TCP: star-topology isolation,
data-egress containment, CLI researcher runs, and stop-mid-round."""

import json
import threading
import time

import numpy as np
import pytest

from fedbed import protocol as P
from fedbed.cli import researcher_main
from fedbed.demo import build_federation, synth_linear_table, write_csv
from fedbed.node.admin import AdminClient
from fedbed.node.approval import STATUS_APPROVED

from conftest import make_plan

SENTINEL = "13371337.733173"


@pytest.fixture
def tcp_federation(tmp_path):
    fed = build_federation(tmp_path, rounds=2, transport="tcp", seed=21,
                           reply_timeout_ms=20000, admin_ports=True)
    yield fed
    fed.close()


class TestStarTopology:
    def test_all_dialed_endpoints_are_the_broker(self, tcp_federation):
        fed = tcp_federation
        fed.experiment.search_federation(timeout_ms=1200)
        fed.experiment.run_round()
        service = fed.broker_service
        broker_endpoints = {("127.0.0.1", service.ctrl_port),
                            ("127.0.0.1", service.blob_port)}
        for client in [*fed.node_clients, fed.researcher_client]:
            assert set(client.dialed_endpoints) <= broker_endpoints
            assert client.dialed_endpoints  # actually talked to the broker

    def test_round_completes_over_tcp(self, tcp_federation):
        fed = tcp_federation
        fed.experiment.search_federation(timeout_ms=1200)
        record = fed.experiment.run_round()
        assert len(record.responders) == 3


class TestNoDataEgress:
    def test_sentinel_value_never_leaves_the_node(self, tmp_path):
        """Plant a sentinel in a dataset column dropped by preprocessing and
        grep every published message and stored blob for it."""
        columns, rows = synth_linear_table(40, 3, seed=1)
        rows = np.column_stack([rows, np.full(40, float(SENTINEL))])
        columns = columns + ["secret"]
        plan = make_plan(
            model="linear", d=3, loss="mse", metric="mse",
            preprocessing=(P.PreprocessingStep(
                kind="select_columns", names=("x0", "x1", "x2")),))
        fed = build_federation(
            tmp_path, rounds=1, transport="local", seed=2, plan=plan,
            tables=[(columns, rows)] * 3, reply_timeout_ms=8000)
        try:
            fed.experiment.search_federation(timeout_ms=600)
            fed.experiment.run_round()
            bus = fed.local_broker.bus
            for topic, data in bus.traffic_log:
                assert SENTINEL.encode() not in data, topic
            blob_dir = fed.local_broker.blobs.root
            for blob in blob_dir.iterdir():
                assert SENTINEL.encode() not in blob.read_bytes()
        finally:
            fed.close()


class TestAdminOverTcp:
    def test_dataset_crud_and_plan_review_via_admin_api(self, tmp_path,
                                                        tcp_federation):
        fed = tcp_federation
        node = fed.nodes[0]
        admin = AdminClient("127.0.0.1", node.admin_port)
        try:
            columns, rows = synth_linear_table(12, 5, seed=9)
            path = write_csv(tmp_path / "extra.csv", columns, rows)
            reply = admin.call(cmd="dataset_add", display_name="extra",
                               tags=["extra"], data_type="tabular",
                               path=str(path), target_column="y",
                               dataset_id="extra-ds")
            assert reply["dataset"]["sample_count"] == 12
            listed = admin.call(cmd="dataset_list")["datasets"]
            assert any(d["dataset_id"] == "extra-ds" for d in listed)
            plan = make_plan(name="admin-flow")
            record = node.approvals.ensure_pending(plan)
            got = admin.call(cmd="plan_get", plan_hash=record.plan_hash)
            # served canonical text hashes to the claimed hash
            import hashlib
            assert hashlib.sha256(
                got["plan_canonical"].encode()).hexdigest() == got["plan_hash"]
            admin.call(cmd="plan_review", plan_hash=record.plan_hash,
                       decision="approved", note="ok")
            assert node.approvals.status_for(record.plan_hash) == "approved"
            admin.call(cmd="dataset_delete", dataset_id="extra-ds")
            listed = admin.call(cmd="dataset_list")["datasets"]
            assert not any(d["dataset_id"] == "extra-ds" for d in listed)
        finally:
            admin.close()


class TestStopMidRound:
    def test_stop_produces_error_reply_and_stopped_task(self, tmp_path):
        gate = threading.Event()
        stop_now = threading.Event()

        def slow_hook(event, info):
            if event == "train_step":
                gate.set()
                stop_now.wait(timeout=10)

        fed = build_federation(
            tmp_path, rounds=1, transport="local", seed=4,
            reply_timeout_ms=20000, min_nodes_per_round=2,
            training_args=P.TrainingArgs(
                learning_rate=0.01, momentum=0.0, batch_size=8,
                num_local_updates=500, dropout_rate=0.0, rng_seed=4,
                validation_split_holdout_fraction=0.1),
            hooks={"node-1": slow_hook})
        try:
            fed.experiment.search_federation(timeout_ms=600)
            result = {}

            def run():
                result["record"] = fed.experiment.run_round()

            runner = threading.Thread(target=run)
            runner.start()
            assert gate.wait(timeout=10)
            node = fed.nodes[0]
            assert node.stop_current_task() is True
            stop_now.set()
            runner.join(timeout=30)
            record = result["record"]
            assert "node-1" not in record.responders
            assert set(record.responders) == {"node-2", "node-3"}
            states = [t.state for t in node.tasks.list_tasks()]
            assert "stopped" in states
        finally:
            stop_now.set()
            fed.close()

    def test_node_accepts_new_request_after_stop(self, tmp_path):
        fed = build_federation(tmp_path, rounds=2, transport="local", seed=4,
                               reply_timeout_ms=8000)
        try:
            fed.experiment.search_federation(timeout_ms=600)
            fed.nodes[0].stop_current_task()  # idle stop: no-op
            record = fed.experiment.run_round()
            assert len(record.responders) == 3
        finally:
            fed.close()


class TestResearcherCliOverTcp:
    def _write_config(self, tmp_path, rounds, extra=None):
        plan = P.TrainingPlan(
            plan_name="cli-tcp", model_spec=P.LinearRegressionSpec(in_dim=5),
            optimizer_spec=P.OptimizerSpec(uses_momentum=False),
            loss_spec=P.LossKind.MSE, preprocessing_spec=(),
            validation_metric=P.MetricKind.MSE)
        config = {
            "experiment_id": "cli-tcp-exp", "tags": ["demo", "synthetic"],
            "plan": plan.to_dict(), "rounds": rounds,
            "learning_rate": 0.05, "momentum": 0.0, "batch_size": 4096,
            "num_local_updates": 1, "rng_seed": 13,
            "reply_timeout_ms": 20000, "min_nodes_per_round": 3,
            "on_shortfall": "continue_with_responders",
            "secagg_enabled": False,
        }
        config.update(extra or {})
        path = tmp_path / "experiment.json"
        path.write_text(json.dumps(config))
        return path, plan

    def test_run_and_resume(self, tmp_path, capsys):
        fed = build_federation(tmp_path / "fed", rounds=1, transport="tcp",
                               seed=13, admin_ports=False)
        service = fed.broker_service
        config_path, plan = self._write_config(tmp_path, rounds=2)
        for node in fed.nodes:
            record = node.approvals.ensure_pending(plan)
            if record.status != STATUS_APPROVED:
                node.approvals.review(record.plan_hash, STATUS_APPROVED)
        try:
            rc = researcher_main([
                "run", "--config", str(config_path),
                "--broker-host", "127.0.0.1",
                "--ctrl-port", str(service.ctrl_port),
                "--blob-port", str(service.blob_port),
                "--checkpoint", str(tmp_path / "ckpt.json"),
                "--metrics", str(tmp_path / "metrics.jsonl"),
                "--search-timeout-ms", "800"])
            out = capsys.readouterr().out
            assert rc == 0
            assert "round 0" in out and "round 1" in out
            # resume: rounds already done, so nothing executes but exit 0
            config_path.write_text(json.dumps({
                **json.loads(config_path.read_text()), "rounds": 3}))
            rc = researcher_main([
                "run", "--config", str(config_path),
                "--resume", str(tmp_path / "ckpt.json"),
                "--broker-host", "127.0.0.1",
                "--ctrl-port", str(service.ctrl_port),
                "--blob-port", str(service.blob_port),
                "--checkpoint", str(tmp_path / "ckpt.json"),
                "--metrics", str(tmp_path / "metrics.jsonl"),
                "--search-timeout-ms", "800"])
            out = capsys.readouterr().out
            assert rc == 0
            assert "round 2" in out and "round 1" not in out
        finally:
            fed.close()


class TestBlobTransferFailure:
    def test_broker_loss_mid_round_is_blob_transfer_error(self, tmp_path):
        from fedbed.errors import BlobTransferError, BrokerUnavailable

        fed = build_federation(tmp_path, rounds=1, transport="tcp", seed=6,
                               reply_timeout_ms=4000)
        try:
            fed.experiment.search_federation(timeout_ms=1200)
            fed.broker_service.stop()
            with pytest.raises((BlobTransferError, BrokerUnavailable)):
                fed.experiment.run_round()
            assert fed.experiment.state.round_index == 0
        finally:
            fed.broker_service = None  # already stopped
            for daemon in fed.nodes:
                daemon.stop()
            for client in [*fed.node_clients, fed.researcher_client]:
                client.close()
            fed.experiment.close()
