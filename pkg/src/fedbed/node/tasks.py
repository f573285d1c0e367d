"""Crash-safe sequential task queue.

A task is persisted before it is acknowledged or executed; tasks that were
Running when the process died come back as Queued on restart.
"""

from __future__ import annotations

import json
import threading
import uuid
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

from ..errors import MalformedBlob, UnknownDataset
from ..protocol import TrainRequestBody
from ..util import atomic_write_text

QUEUE_FORMAT_VERSION = "1"

STATE_QUEUED = "queued"
STATE_RUNNING = "running"
STATE_DONE = "done"
STATE_FAILED = "failed"
STATE_STOPPED = "stopped"

_FINAL_STATES = (STATE_DONE, STATE_FAILED, STATE_STOPPED)
_ORDER = {STATE_QUEUED: 0, STATE_RUNNING: 1, STATE_DONE: 2,
          STATE_FAILED: 2, STATE_STOPPED: 2}


@dataclass(frozen=True)
class NodeTask:
    task_id: str
    received_at: int
    body: TrainRequestBody
    state: str = STATE_QUEUED
    reply_to: str = ""

    def to_dict(self) -> dict:
        return {"task_id": self.task_id, "received_at": self.received_at,
                "body": self.body.to_dict(), "state": self.state,
                "reply_to": self.reply_to}

    @classmethod
    def from_dict(cls, data) -> "NodeTask":
        try:
            return cls(task_id=data["task_id"], received_at=data["received_at"],
                       body=TrainRequestBody.from_dict(data["body"]),
                       state=data["state"], reply_to=data.get("reply_to", ""))
        except (KeyError, TypeError) as exc:
            raise MalformedBlob(f"bad task record: {exc}") from exc


class TaskQueue:
    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._tasks: dict = {}
        self._arrival: list = []
        self._load()

    def _load(self) -> None:
        if not self.path.is_file():
            return
        try:
            doc = json.loads(self.path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise MalformedBlob(f"corrupt task queue: {exc}") from exc
        if doc.get("format_version") != QUEUE_FORMAT_VERSION:
            raise MalformedBlob("unsupported task queue version")
        for raw in doc.get("tasks", []):
            task = NodeTask.from_dict(raw)
            if task.state == STATE_RUNNING:
                # interrupted mid-run by a crash: resume from the queue
                task = replace(task, state=STATE_QUEUED)
            self._tasks[task.task_id] = task
            self._arrival.append(task.task_id)

    def _persist(self) -> None:
        doc = {"format_version": QUEUE_FORMAT_VERSION,
               "tasks": [self._tasks[tid].to_dict() for tid in self._arrival]}
        atomic_write_text(self.path, json.dumps(doc, indent=2))

    def enqueue(self, body: TrainRequestBody, received_at: int,
                reply_to: str = "") -> NodeTask:
        task = NodeTask(task_id=f"task-{uuid.uuid4().hex[:12]}",
                        received_at=received_at, body=body, reply_to=reply_to)
        with self._lock:
            self._tasks[task.task_id] = task
            self._arrival.append(task.task_id)
            self._persist()
        return task

    def claim_next(self) -> Optional[NodeTask]:
        """Mark the oldest queued task Running and return it."""
        with self._lock:
            for tid in self._arrival:
                if self._tasks[tid].state == STATE_QUEUED:
                    task = replace(self._tasks[tid], state=STATE_RUNNING)
                    self._tasks[tid] = task
                    self._persist()
                    return task
            return None

    def finish(self, task_id: str, state: str) -> NodeTask:
        if state not in _FINAL_STATES:
            raise MalformedBlob(f"not a final state: {state!r}")
        with self._lock:
            if task_id not in self._tasks:
                raise UnknownDataset(f"no task {task_id!r}")
            current = self._tasks[task_id]
            if _ORDER[state] < _ORDER[current.state]:
                raise MalformedBlob("task states advance monotonically")
            task = replace(current, state=state)
            self._tasks[task_id] = task
            self._persist()
            return task

    def list_tasks(self) -> list:
        with self._lock:
            return [self._tasks[tid] for tid in self._arrival]

    def get(self, task_id: str) -> NodeTask:
        with self._lock:
            if task_id not in self._tasks:
                raise UnknownDataset(f"no task {task_id!r}")
            return self._tasks[task_id]
