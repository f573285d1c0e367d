"""CLI adapters: help paths, exit codes, and admin round-trips against a
live daemon."""

import json

import numpy as np
import pytest

from fedbed import secagg
from fedbed.broker.client import LocalBroker
from fedbed.cli import dealer_main, node_main, researcher_main
from fedbed.node.config import NodeConfig
from fedbed.node.daemon import NodeDaemon
from fedbed.node.executor import NodePolicy

from conftest import make_plan, write_table_csv


class TestHelp:
    @pytest.mark.parametrize("main,argv", [
        (researcher_main, ["--help"]),
        (researcher_main, ["run", "--help"]),
        (researcher_main, ["demo", "--help"]),
        (node_main, ["--help"]),
        (node_main, ["dataset", "--help"]),
        (node_main, ["plan", "--help"]),
        (dealer_main, ["--help"]),
    ])
    def test_help_exits_zero(self, main, argv, capsys):
        with pytest.raises(SystemExit) as excinfo:
            main(argv)
        assert excinfo.value.code == 0
        assert "usage" in capsys.readouterr().out

    def test_unknown_flag_is_usage_error(self):
        with pytest.raises(SystemExit) as excinfo:
            dealer_main(["--nodes", "a,b", "--out-dir", "/tmp/x",
                         "--no-such-flag"])
        assert excinfo.value.code == 2

    def test_missing_required_flag_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as excinfo:
            node_main(["dataset", "add", "--name", "x"])
        assert excinfo.value.code == 2


class TestDealer:
    def test_writes_key_files(self, tmp_path, capsys):
        rc = dealer_main(["--nodes", "n1,n2,n3", "--out-dir", str(tmp_path),
                          "--modulus-bits", "64", "--seed", "3"])
        assert rc == 0
        out = capsys.readouterr().out.strip().splitlines()
        assert len(out) == 4
        key = secagg.read_key_file(tmp_path / "secagg_researcher.json")
        assert key.cohort == ("n1", "n2", "n3")


@pytest.fixture
def live_node(tmp_path):
    rng = np.random.default_rng(0)
    csv_path = write_table_csv(
        tmp_path / "data.csv", ["x0", "y"],
        [[float(rng.normal()), float(rng.normal())] for _ in range(30)])
    broker = LocalBroker(tmp_path / "blobs")
    config = NodeConfig(node_id="cli-node", store_dir=str(tmp_path / "store"),
                        admin_port=0, policy=NodePolicy())
    daemon = NodeDaemon(config, broker.make_client())
    daemon.start()
    yield daemon, csv_path
    daemon.stop()


def admin_argv(daemon):
    return ["--admin-host", "127.0.0.1", "--admin-port", str(daemon.admin_port)]


class TestNodeAdminCli:
    def test_dataset_add_then_list(self, live_node, capsys):
        daemon, csv_path = live_node
        rc = node_main(["dataset", "add", *admin_argv(daemon),
                        "--name", "demo set", "--tags", "demo,synthetic",
                        "--type", "tabular", "--path", str(csv_path),
                        "--target-column", "y", "--dataset-id", "cli-ds"])
        assert rc == 0
        assert capsys.readouterr().out.strip() == "cli-ds"
        rc = node_main(["dataset", "list", *admin_argv(daemon)])
        assert rc == 0
        out = capsys.readouterr().out
        assert "cli-ds" in out and "samples=30" in out

    def test_dataset_add_bad_path_exits_nonzero(self, live_node, capsys):
        daemon, _ = live_node
        rc = node_main(["dataset", "add", *admin_argv(daemon),
                        "--name", "x", "--tags", "t", "--type", "tabular",
                        "--path", "/no/such/file.csv", "--target-column", "y"])
        assert rc != 0
        assert "PathNotFound" in capsys.readouterr().err

    def test_plan_approve_flow(self, live_node, capsys):
        daemon, _ = live_node
        plan = make_plan(name="cli-plan")
        record = daemon.approvals.ensure_pending(plan)
        rc = node_main(["plan", "approve", *admin_argv(daemon),
                        record.plan_hash, "--note", "reviewed by hand"])
        assert rc == 0
        assert "Approved" in capsys.readouterr().out
        rc = node_main(["plan", "list", *admin_argv(daemon)])
        out = capsys.readouterr().out
        assert "approved" in out and "cli-plan" in out

    def test_plan_approve_twice_exits_5(self, live_node, capsys):
        daemon, _ = live_node
        record = daemon.approvals.ensure_pending(make_plan(name="twice"))
        assert node_main(["plan", "approve", *admin_argv(daemon),
                          record.plan_hash]) == 0
        capsys.readouterr()
        rc = node_main(["plan", "approve", *admin_argv(daemon),
                        record.plan_hash])
        assert rc == 5
        assert "AlreadyDecided" in capsys.readouterr().err

    def test_plan_reject_note_visible_in_list(self, live_node, capsys):
        daemon, _ = live_node
        record = daemon.approvals.ensure_pending(make_plan(name="reject-me"))
        node_main(["plan", "reject", *admin_argv(daemon), record.plan_hash,
                   "--note", "uses too many columns"])
        capsys.readouterr()
        node_main(["plan", "list", *admin_argv(daemon)])
        out = capsys.readouterr().out
        assert "rejected" in out and "uses too many columns" in out

    def test_task_stop_when_idle(self, live_node, capsys):
        daemon, _ = live_node
        rc = node_main(["task", "stop", *admin_argv(daemon)])
        assert rc == 0
        assert "no task running" in capsys.readouterr().out


class TestResearcherRun:
    def test_malformed_config_exits_3_without_network(self, tmp_path, capsys):
        config = tmp_path / "bad.json"
        config.write_text("{not json")
        rc = researcher_main(["run", "--config", str(config),
                              "--ctrl-port", "1", "--blob-port", "1"])
        assert rc == 3
        assert "ConfigError" in capsys.readouterr().err

    def test_unreachable_broker_exits_4(self, tmp_path, capsys):
        plan = make_plan()
        config = {
            "experiment_id": "cli-exp", "tags": ["demo"],
            "plan": plan.to_dict(), "rounds": 1,
            "learning_rate": 0.1, "momentum": 0.0, "batch_size": 8,
            "num_local_updates": 1, "reply_timeout_ms": 300,
            "min_nodes_per_round": 1,
            "on_shortfall": "continue_with_responders",
            "secagg_enabled": False,
        }
        path = tmp_path / "config.json"
        path.write_text(json.dumps(config))
        rc = researcher_main(["run", "--config", str(path),
                              "--broker-host", "127.0.0.1",
                              "--ctrl-port", "1", "--blob-port", "1"])
        assert rc == 4


class TestDemoSubcommand:
    def test_demo_runs_to_completion(self, tmp_path, capsys):
        rc = researcher_main(["demo", "--workdir", str(tmp_path / "demo"),
                              "--rounds", "2"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "demo complete: 2 rounds" in out
        assert "overhead fraction" in out
        assert (tmp_path / "demo" / "checkpoint.json").is_file()
        assert (tmp_path / "demo" / "metrics.jsonl").is_file()
