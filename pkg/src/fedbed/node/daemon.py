"""The node daemon: broker subscriptions, sequential task execution, and the
local admin API that the CLI and governance console drive.

One training task runs at a time; registry and ledger mutations go through
their single-writer stores. The admin listener serves concurrent readers.
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import threading
from pathlib import Path
from typing import Callable, Optional

from .. import protocol, secagg
from ..broker.client import BrokerClient
from ..broker.core import topic_for_node, topic_for_researcher, TOPIC_ALL_NODES
from ..broker.wire import recv_frame, send_frame
from ..clock import SystemClock
from ..errors import FedbedError, HashMismatch, MalformedMessage, TaskStopped
from .approval import ApprovalLedger
from .config import NodeConfig
from .executor import ExecutionContext, execute_train_task
from .registry import DataLoadingPlan, DatasetRegistry
from . import tasks as taskstates
from .tasks import TaskQueue

log = logging.getLogger(__name__)


class _ThreadingServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class NodeDaemon:
    def __init__(self, config: NodeConfig, broker: BrokerClient,
                 clock=None, hooks: Optional[Callable] = None,
                 fault_injector: Optional[Callable] = None):
        self.config = config
        self.broker = broker
        self.clock = clock if clock is not None else SystemClock()
        store = Path(config.store_dir)
        store.mkdir(parents=True, exist_ok=True)
        self.registry = DatasetRegistry(store / "datasets.json")
        self.approvals = ApprovalLedger(store / "approvals.json", clock=self.clock)
        self.tasks = TaskQueue(store / "tasks.json")
        self.policy = config.policy
        self._hooks = hooks
        self._fault_injector = fault_injector
        self._stop_event = threading.Event()      # stop current task
        self._shutdown = threading.Event()        # stop the daemon
        self._threads: list = []
        self._subs: list = []
        self._admin_server = None
        self.admin_port: Optional[int] = None
        self._running_task_id: Optional[str] = None
        self._task_lock = threading.Lock()
        secagg_key = None
        if config.secagg_key_file:
            secagg_key = secagg.read_key_file(config.secagg_key_file)
        self._exec_ctx = ExecutionContext(
            node_id=config.node_id, registry=self.registry,
            approvals=self.approvals, policy=self.policy, broker=broker,
            clock=self.clock, secagg_key=secagg_key,
            stop_event=self._stop_event, hooks=self._combined_hooks)

    def _combined_hooks(self, event: str, info: dict) -> None:
        if self._fault_injector is not None:
            self._fault_injector(event, info)
        if self._hooks is not None:
            self._hooks(event, info)

    # -- lifecycle --

    def start(self) -> None:
        for topic in (TOPIC_ALL_NODES, topic_for_node(self.config.node_id)):
            sub = self.broker.subscribe(self.config.node_id, topic)
            self._subs.append(sub)
            thread = threading.Thread(target=self._receive_loop, args=(sub,),
                                      name=f"node-{self.config.node_id}-recv",
                                      daemon=True)
            thread.start()
            self._threads.append(thread)
        worker = threading.Thread(target=self._worker_loop,
                                  name=f"node-{self.config.node_id}-worker",
                                  daemon=True)
        worker.start()
        self._threads.append(worker)
        if self.config.admin_port is not None:
            self._start_admin()
        log.info("node %s started", self.config.node_id)

    def stop(self) -> None:
        self._shutdown.set()
        self._stop_event.set()
        if self._admin_server is not None:
            self._admin_server.shutdown()
            self._admin_server.server_close()
        for thread in self._threads:
            thread.join(timeout=5)

    def stop_current_task(self) -> bool:
        """Signal the running task to halt at its next update boundary.

        Idempotent; returns whether a task was running when asked.
        """
        with self._task_lock:
            running = self._running_task_id is not None
        if running:
            self._stop_event.set()
        return running

    # -- broker plane --

    def _receive_loop(self, sub) -> None:
        while not self._shutdown.is_set():
            data = sub.get(timeout=0.2)
            if data is None:
                continue
            try:
                self._handle_bytes(data)
            except Exception:
                log.exception("node %s: error handling a message",
                              self.config.node_id)

    def _handle_bytes(self, data: bytes) -> None:
        try:
            envelope = protocol.decode(data)
        except HashMismatch as exc:
            self._refuse_undecodable_train(data, exc)
            return
        except FedbedError as exc:
            log.warning("node %s: dropping undecodable message: %s",
                        self.config.node_id, exc.message)
            return
        self._handle_envelope(envelope)

    def _refuse_undecodable_train(self, data: bytes, exc: HashMismatch) -> None:
        """A train request whose plan fails its hash check never trains, but
        the researcher still deserves the refusal."""
        try:
            doc = json.loads(data.decode("utf-8"))
            payload = doc.get("payload", {})
            reply = protocol.TrainReplyBody(
                experiment_id=str(payload.get("experiment_id", "")),
                round_index=int(payload.get("round_index", 0)),
                node_id=self.config.node_id,
                status=protocol.TrainStatus.REFUSED,
                refusal_reason=f"{exc.code}: {exc.message}")
            self._publish_to(str(doc.get("sender_id", "")), reply)
        except (ValueError, FedbedError):
            log.warning("node %s: hash-mismatched train request could not "
                        "be answered", self.config.node_id)

    def _handle_envelope(self, envelope: protocol.MessageEnvelope) -> None:
        kind = envelope.kind
        if kind is protocol.MessageKind.SEARCH_REQUEST:
            matches = self.registry.search(envelope.payload.tags)
            self._publish_to(envelope.sender_id, protocol.SearchReplyBody(
                node_id=self.config.node_id, matches=tuple(matches)))
        elif kind is protocol.MessageKind.TRAIN_REQUEST:
            self.tasks.enqueue(envelope.payload, self.clock.now_ms(),
                               reply_to=envelope.sender_id)
        elif kind is protocol.MessageKind.APPROVAL_STATUS_REQUEST:
            self._handle_approval_status(envelope)
        elif kind is protocol.MessageKind.PING:
            self._publish_to(envelope.sender_id,
                             protocol.PongBody(nonce=envelope.payload.nonce))

    def _handle_approval_status(self, envelope) -> None:
        payload = envelope.payload
        if protocol.compute_plan_hash(payload.plan) != payload.plan_hash:
            status = "hash_mismatch"
        elif not self.policy.approval_required:
            status = "not_required"
        else:
            status = self.approvals.ensure_pending(payload.plan).status
        self._publish_to(envelope.sender_id, protocol.ApprovalStatusReplyBody(
            node_id=self.config.node_id, plan_hash=payload.plan_hash.digest,
            status=status))

    def _publish_to(self, researcher_id: str, payload) -> None:
        if not researcher_id:
            return
        topic = topic_for_researcher(researcher_id)
        envelope = protocol.make_envelope(self.config.node_id, topic, payload,
                                          clock=self.clock)
        self.broker.publish(topic, envelope)

    # -- task execution --

    def _worker_loop(self) -> None:
        while not self._shutdown.is_set():
            task = self.tasks.claim_next()
            if task is None:
                self._shutdown.wait(0.05)
                continue
            self._run_task(task)

    def _run_task(self, task) -> None:
        with self._task_lock:
            self._running_task_id = task.task_id
            self._stop_event.clear()
        final_state = taskstates.STATE_DONE
        reply = None
        try:
            reply = execute_train_task(self._exec_ctx, task.body)
            if reply.status is not protocol.TrainStatus.SUCCESS:
                final_state = taskstates.STATE_FAILED
        except TaskStopped as exc:
            final_state = taskstates.STATE_STOPPED
            reply = protocol.TrainReplyBody(
                experiment_id=task.body.experiment_id,
                round_index=task.body.round_index,
                node_id=self.config.node_id,
                status=protocol.TrainStatus.ERROR,
                refusal_reason="stopped by node operator")
        except _SimulatedCrash:
            # fault injection: die silently, never reply
            final_state = taskstates.STATE_FAILED
        except Exception:
            log.exception("node %s: task %s failed unexpectedly",
                          self.config.node_id, task.task_id)
            final_state = taskstates.STATE_FAILED
            reply = protocol.TrainReplyBody(
                experiment_id=task.body.experiment_id,
                round_index=task.body.round_index,
                node_id=self.config.node_id,
                status=protocol.TrainStatus.ERROR,
                refusal_reason="TrainingFailure: internal error")
        finally:
            with self._task_lock:
                self._running_task_id = None
            self._stop_event.clear()
            self.tasks.finish(task.task_id, final_state)
        if reply is not None:
            try:
                self._publish_to(task.reply_to, reply)
                if reply.status is protocol.TrainStatus.SUCCESS \
                        and "train_loss" in reply.applied_overrides:
                    self._publish_to(task.reply_to, protocol.MonitorBody(
                        experiment_id=task.body.experiment_id,
                        round_index=task.body.round_index,
                        node_id=self.config.node_id, name="train_loss",
                        value=float(reply.applied_overrides["train_loss"])))
            except FedbedError as exc:
                log.warning("node %s: could not deliver reply: %s",
                            self.config.node_id, exc.message)

    # -- admin API --

    def _start_admin(self) -> None:
        daemon = self

        class AdminHandler(socketserver.BaseRequestHandler):
            def handle(self):
                daemon._serve_admin(self.request)

        self._admin_server = _ThreadingServer(
            ("127.0.0.1", self.config.admin_port), AdminHandler)
        self.admin_port = self._admin_server.server_address[1]
        thread = threading.Thread(target=self._admin_server.serve_forever,
                                  name=f"node-{self.config.node_id}-admin",
                                  daemon=True)
        thread.start()
        self._threads.append(thread)

    def _serve_admin(self, sock: socket.socket) -> None:
        try:
            while True:
                frame = recv_frame(sock)
                if frame is None:
                    return
                send_frame(sock, self._admin_reply(frame))
        except FedbedError:
            return
        finally:
            try:
                sock.close()
            except OSError:
                pass

    def _admin_reply(self, frame: bytes) -> bytes:
        try:
            request = json.loads(frame.decode("utf-8"))
            if not isinstance(request, dict):
                raise MalformedMessage("admin request must be a JSON object")
            result = self._dispatch_admin(request)
            return json.dumps({"ok": True, **result}).encode("utf-8")
        except FedbedError as exc:
            return json.dumps({"ok": False, "error": {
                "code": exc.code, "message": exc.message}}).encode("utf-8")
        except (TypeError, ValueError, KeyError) as exc:
            return json.dumps({"ok": False, "error": {
                "code": "MalformedMessage", "message": str(exc)}}).encode("utf-8")

    def _dispatch_admin(self, request: dict) -> dict:
        cmd = request.get("cmd")
        if cmd == "ping":
            return {"node_id": self.config.node_id}
        if cmd == "node_info":
            return {"node_id": self.config.node_id,
                    "policy": self.policy.to_dict()}
        if cmd == "dataset_add":
            plan_id = None
            if request.get("loading_plan") is not None:
                plan = DataLoadingPlan.from_dict(request["loading_plan"])
                plan_id = self.registry.add_loading_plan(plan)
            record = self.registry.register_dataset(
                display_name=request["display_name"],
                tags=request["tags"],
                data_type=request["data_type"],
                path=request["path"],
                dataset_id=request.get("dataset_id"),
                target_column=request.get("target_column"),
                loading_plan_id=request.get("loading_plan_id", plan_id))
            return {"dataset_id": record.dataset_id,
                    "dataset": record.to_dict()}
        if cmd == "dataset_list":
            return {"datasets": [r.to_dict() for r in self.registry.list_datasets()]}
        if cmd == "dataset_delete":
            self.registry.delete_dataset(request["dataset_id"])
            return {"dataset_id": request["dataset_id"]}
        if cmd == "plan_list":
            return {"plans": [r.to_dict() for r in self.approvals.list_records()]}
        if cmd == "plan_get":
            record = self.approvals.get(request["plan_hash"])
            return {"plan_hash": record.plan_hash,
                    "status": record.status,
                    "reviewer_note": record.reviewer_note,
                    "plan_canonical": self.approvals.canonical_plan_text(
                        request["plan_hash"])}
        if cmd == "plan_review":
            record = self.approvals.review(request["plan_hash"],
                                           request["decision"],
                                           request.get("note", ""))
            return {"plan": record.to_dict()}
        if cmd == "task_list":
            return {"tasks": [t.to_dict() for t in self.tasks.list_tasks()]}
        if cmd == "task_stop":
            was_running = self.stop_current_task()
            return {"was_running": was_running}
        raise MalformedMessage(f"unknown admin command {cmd!r}")


class _SimulatedCrash(BaseException):
    """Raised by test fault injectors to kill a node mid-round."""
