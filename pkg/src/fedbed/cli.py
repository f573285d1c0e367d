"""Operator entry points: broker, node, researcher, and the secagg dealer.

Every command is a thin adapter over the owning module. Exit codes: 0
success, 2 usage error, 3 config error, 4 network error, 5 policy or
approval refusal, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
from pathlib import Path

from . import secagg
from .broker.client import TcpBrokerClient
from .broker.service import BrokerService, DEFAULT_BLOB_PORT, DEFAULT_CTRL_PORT
from .errors import ConfigError, FedbedError
from .node.admin import AdminClient
from .node.config import DEFAULT_ADMIN_PORT, load_node_config
from .node.daemon import NodeDaemon
from .researcher.checkpoint import load_checkpoint, save_checkpoint
from .researcher.experiment import Experiment, load_experiment_config
from .researcher.metrics import runtime_report

log = logging.getLogger(__name__)


def _env_int(name: str, default: int) -> int:
    raw = os.environ.get(name)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"environment variable {name} must be an integer")


def _run(main_fn, argv) -> int:
    logging.basicConfig(level=os.environ.get("FEDBED_LOG", "INFO"),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return main_fn(argv)
    except FedbedError as exc:
        print(f"error [{exc.code}]: {exc.message}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        return 130


# --- fedbed-broker -------------------------------------------------------------

def broker_main(argv=None) -> int:
    return _run(_broker_main, argv)


def _broker_main(argv) -> int:
    parser = argparse.ArgumentParser(
        prog="fedbed-broker",
        description="Run the message broker and parameter blob store.")
    parser.add_argument("--ctrl-port", type=int,
                        default=_env_int("FEDBED_BROKER_CTRL_PORT",
                                         DEFAULT_CTRL_PORT))
    parser.add_argument("--blob-port", type=int,
                        default=_env_int("FEDBED_BROKER_BLOB_PORT",
                                         DEFAULT_BLOB_PORT))
    parser.add_argument("--store-dir", required=True,
                        help="directory for the content-addressed blob store")
    parser.add_argument("--size-cap-bytes", type=int, default=None,
                        help="optional cap on total stored blob bytes")
    parser.add_argument("--host", default="127.0.0.1")
    args = parser.parse_args(argv)
    service = BrokerService(args.store_dir, ctrl_port=args.ctrl_port,
                            blob_port=args.blob_port,
                            size_cap_bytes=args.size_cap_bytes, host=args.host)
    service.start()
    print(f"broker listening: ctrl={service.ctrl_port} "
          f"blob={service.blob_port} store={args.store_dir}", flush=True)
    signal.sigwait({signal.SIGINT, signal.SIGTERM})
    service.stop()
    return 0


# --- fedbed-node ----------------------------------------------------------------

def node_main(argv=None) -> int:
    return _run(_node_main, argv)


def _node_main(argv) -> int:
    parser = argparse.ArgumentParser(
        prog="fedbed-node",
        description="Run or administer a clinical-site node daemon.")
    sub = parser.add_subparsers(dest="command", required=True)

    start = sub.add_parser("start", help="run the node daemon")
    start.add_argument("--config", required=True, help="node config JSON file")

    def admin_args(p):
        p.add_argument("--admin-host", default="127.0.0.1")
        p.add_argument("--admin-port", type=int,
                       default=_env_int("FEDBED_NODE_ADMIN_PORT",
                                        DEFAULT_ADMIN_PORT))

    dataset = sub.add_parser("dataset", help="manage registered datasets")
    dataset_sub = dataset.add_subparsers(dest="dataset_command", required=True)
    add = dataset_sub.add_parser("add")
    admin_args(add)
    add.add_argument("--name", required=True)
    add.add_argument("--tags", required=True,
                     help="comma-separated, e.g. prostate,t2w")
    add.add_argument("--type", required=True,
                     choices=("tabular", "folder_image"))
    add.add_argument("--path", required=True)
    add.add_argument("--target-column")
    add.add_argument("--dataset-id")
    add.add_argument("--loading-plan-json",
                     help="path to a DataLoadingPlan JSON file")
    lst = dataset_sub.add_parser("list")
    admin_args(lst)
    delete = dataset_sub.add_parser("delete")
    admin_args(delete)
    delete.add_argument("--id", required=True)

    plan = sub.add_parser("plan", help="review training plans")
    plan_sub = plan.add_subparsers(dest="plan_command", required=True)
    plan_list = plan_sub.add_parser("list")
    admin_args(plan_list)
    for decision in ("approve", "reject"):
        p = plan_sub.add_parser(decision)
        admin_args(p)
        p.add_argument("hash", help="plan hash (lowercase hex)")
        p.add_argument("--note", default="")

    task = sub.add_parser("task", help="inspect or stop the task queue")
    task_sub = task.add_subparsers(dest="task_command", required=True)
    task_list = task_sub.add_parser("list")
    admin_args(task_list)
    stop = task_sub.add_parser("stop")
    admin_args(stop)

    args = parser.parse_args(argv)
    if args.command == "start":
        return _node_start(args)
    client = AdminClient(args.admin_host, args.admin_port)
    try:
        return _node_admin_command(args, client)
    finally:
        client.close()


def _node_start(args) -> int:
    config = load_node_config(args.config)
    broker = TcpBrokerClient(config.broker_host, config.broker_ctrl_port,
                             config.broker_blob_port)
    daemon = NodeDaemon(config, broker)
    daemon.start()
    print(f"node {config.node_id} started; admin port {daemon.admin_port}",
          flush=True)
    signal.sigwait({signal.SIGINT, signal.SIGTERM})
    daemon.stop()
    broker.close()
    return 0


def _node_admin_command(args, client: AdminClient) -> int:
    if args.command == "dataset":
        if args.dataset_command == "add":
            request = dict(cmd="dataset_add", display_name=args.name,
                           tags=[t for t in args.tags.split(",") if t],
                           data_type=args.type, path=args.path,
                           target_column=args.target_column,
                           dataset_id=args.dataset_id)
            if args.loading_plan_json:
                request["loading_plan"] = json.loads(
                    Path(args.loading_plan_json).read_text())
            reply = client.call(**request)
            print(reply["dataset_id"])
        elif args.dataset_command == "list":
            reply = client.call(cmd="dataset_list")
            for record in reply["datasets"]:
                print(f"{record['dataset_id']}  {record['display_name']}  "
                      f"tags={','.join(record['tags'])}  "
                      f"samples={record['sample_count']}")
        else:
            client.call(cmd="dataset_delete", dataset_id=args.id)
            print(f"deleted {args.id}")
        return 0
    if args.command == "plan":
        if args.plan_command == "list":
            reply = client.call(cmd="plan_list")
            for record in reply["plans"]:
                note = f"  note={record['reviewer_note']!r}" \
                    if record["reviewer_note"] else ""
                print(f"{record['plan_hash']}  {record['status']}"
                      f"  {record['plan_snapshot']['plan_name']}{note}")
        else:
            decision = ("approved" if args.plan_command == "approve"
                        else "rejected")
            reply = client.call(cmd="plan_review", plan_hash=args.hash,
                                decision=decision, note=args.note)
            record = reply["plan"]
            print(f"{record['status'].capitalize()}: "
                  f"{record['plan_snapshot']['plan_name']} "
                  f"({record['plan_hash'][:12]}...)")
        return 0
    if args.command == "task":
        if args.task_command == "list":
            reply = client.call(cmd="task_list")
            for task in reply["tasks"]:
                print(f"{task['task_id']}  {task['state']}  "
                      f"round={task['body']['round_index']}")
        else:
            reply = client.call(cmd="task_stop")
            print("stop signalled" if reply["was_running"]
                  else "no task running")
        return 0
    raise ConfigError(f"unhandled command {args.command!r}")


# --- fedbed-researcher ----------------------------------------------------------

def researcher_main(argv=None) -> int:
    return _run(_researcher_main, argv)


def _researcher_main(argv) -> int:
    parser = argparse.ArgumentParser(
        prog="fedbed-researcher",
        description="Run federated experiments from a config file.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run (or resume) an experiment")
    run.add_argument("--config", required=True)
    run.add_argument("--resume", help="checkpoint file to resume from")
    run.add_argument("--broker-host", default="127.0.0.1")
    run.add_argument("--ctrl-port", type=int,
                     default=_env_int("FEDBED_BROKER_CTRL_PORT",
                                      DEFAULT_CTRL_PORT))
    run.add_argument("--blob-port", type=int,
                     default=_env_int("FEDBED_BROKER_BLOB_PORT",
                                      DEFAULT_BLOB_PORT))
    run.add_argument("--checkpoint", help="checkpoint path "
                     "(default <config dir>/checkpoint.json)")
    run.add_argument("--metrics", help="metric log path "
                     "(default <config dir>/metrics.jsonl)")
    run.add_argument("--report", help="write the runtime breakdown JSON here")
    run.add_argument("--researcher-id", default="researcher")
    run.add_argument("--search-timeout-ms", type=int, default=3000,
                     help="how long to collect dataset-search replies")

    demo = sub.add_parser("demo", help="launch broker + 3 local nodes + "
                          "researcher on synthetic data")
    demo.add_argument("--workdir", required=True)
    demo.add_argument("--rounds", type=int, default=5)
    demo.add_argument("--seed", type=int, default=7)

    args = parser.parse_args(argv)
    if args.command == "demo":
        return _researcher_demo(args)
    return _researcher_run(args)


def _researcher_run(args) -> int:
    config = load_experiment_config(args.config)
    base = Path(args.config).resolve().parent
    checkpoint_path = Path(args.checkpoint) if args.checkpoint \
        else base / "checkpoint.json"
    metrics_path = Path(args.metrics) if args.metrics else base / "metrics.jsonl"
    broker = TcpBrokerClient(args.broker_host, args.ctrl_port, args.blob_port)
    if args.resume:
        # the checkpoint carries the state; the config file owns the target
        # round count and any hyperparameters adjusted between invocations
        state = load_checkpoint(args.resume)
        if state.config.experiment_id != config.experiment_id:
            raise ConfigError(
                f"checkpoint belongs to {state.config.experiment_id!r}, "
                f"config describes {config.experiment_id!r}")
        if state.round_index > config.rounds:
            raise ConfigError(
                f"checkpoint has {state.round_index} completed rounds but "
                f"the config asks for {config.rounds}")
        state.config = config
    else:
        state = config
    experiment = Experiment(state, broker, researcher_id=args.researcher_id)
    try:
        federation = experiment.search_federation(
            timeout_ms=args.search_timeout_ms)
        print(f"federation: {', '.join(federation.node_ids)} "
              f"({federation.total_samples()} samples)")
        statuses = experiment.request_approvals(
            timeout_ms=args.search_timeout_ms)
        print("approval status: " + ", ".join(
            f"{n}={s}" for n, s in sorted(statuses.items())))
        final = experiment.run(checkpoint_path=checkpoint_path,
                               metrics_path=metrics_path,
                               on_round=_print_round)
        report = runtime_report(final)
        print(f"runtime: total={report.total_ms:.0f} ms, "
              f"training={report.totals['node_training']:.0f} ms, "
              f"overhead fraction={report.overhead_fraction:.2f}")
        if args.report:
            Path(args.report).write_text(json.dumps(report.to_dict(), indent=2))
        save_checkpoint(final, checkpoint_path)
        print(f"checkpoint: {checkpoint_path}")
        print(f"metrics: {metrics_path}")
        return 0
    finally:
        experiment.close()
        broker.close()


def _print_round(record) -> None:
    losses = ", ".join(
        f"{n}={v.get('holdout_loss', float('nan')):.4f}"
        for n, v in sorted(record.validation.items()))
    print(f"round {record.round_index}: nodes={len(record.responders)} "
          f"holdout loss {losses}")


def _researcher_demo(args) -> int:
    from .demo import run_demo
    out = run_demo(args.workdir, rounds=args.rounds, seed=args.seed,
                   transport="tcp")
    state = out["state"]
    report = out["report"]
    print(f"demo complete: {state.round_index} rounds, "
          f"responders per round = "
          f"{[len(r.responders) for r in state.history]}")
    print(f"approvals: {sorted(out['approvals'].items())}")
    print(f"runtime total {report.total_ms:.0f} ms; category totals: "
          + ", ".join(f"{k}={v:.0f}" for k, v in report.totals.items()))
    print(f"overhead fraction: {report.overhead_fraction:.2f}")
    print(f"checkpoint: {out['checkpoint_path']}")
    print(f"metrics: {out['metrics_path']}")
    return 0


# --- fedbed-secagg-dealer --------------------------------------------------------

def dealer_main(argv=None) -> int:
    return _run(_dealer_main, argv)


def _dealer_main(argv) -> int:
    parser = argparse.ArgumentParser(
        prog="fedbed-secagg-dealer",
        description="Trusted-dealer key ceremony for secure aggregation.")
    parser.add_argument("--nodes", required=True,
                        help="comma-separated node ids, e.g. n1,n2,n3")
    parser.add_argument("--out-dir", required=True)
    parser.add_argument("--modulus-bits", type=int,
                        default=secagg.DEFAULT_MODULUS_BITS)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    node_ids = [n for n in args.nodes.split(",") if n]
    material = secagg.keygen(node_ids, modulus_bits=args.modulus_bits,
                             seed=args.seed)
    paths = secagg.write_key_files(material, args.out_dir)
    for path in paths:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(researcher_main())
