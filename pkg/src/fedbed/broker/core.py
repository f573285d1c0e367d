"""Topic routing and the content-addressed blob store.

Topics form a star: one broadcast topic, one inbox per node, one inbox per
researcher. Delivery is at-most-once to live subscribers with per
(publisher, topic) FIFO order; there is no retention or replay.
"""

from __future__ import annotations

import hashlib
import queue
import re
import threading
from pathlib import Path
from typing import Optional

from ..errors import BlobIntegrityError, BlobNotFound, EmptyBlob, InvalidTopic, StoreFull
from ..util import atomic_write_bytes

TOPIC_ALL_NODES = "fedbed/all-nodes"
_TOPIC_RE = re.compile(r"^fedbed/(all-nodes|node/[^/]+|researcher/[^/]+)$")


def validate_topic(name: str) -> str:
    if not isinstance(name, str) or not _TOPIC_RE.match(name):
        raise InvalidTopic(f"bad topic {name!r}")
    return name


def topic_for_node(node_id: str) -> str:
    return validate_topic(f"fedbed/node/{node_id}")


def topic_for_researcher(researcher_id: str) -> str:
    return validate_topic(f"fedbed/researcher/{researcher_id}")


class Subscription:
    """A live message stream; yields raw envelope bytes.

    Multiple subscriptions may share a sink queue (used by the TCP service
    to multiplex one connection's topics into one outgoing stream).
    """

    def __init__(self, subscriber_id: str, topic: str,
                 sink: Optional["queue.Queue"] = None):
        self.subscriber_id = subscriber_id
        self.topic = topic
        self._queue: "queue.Queue[bytes]" = sink if sink is not None else queue.Queue()
        self.closed = False

    def deliver(self, data: bytes) -> None:
        if not self.closed:
            self._queue.put(data)

    def get(self, timeout: Optional[float] = None) -> Optional[bytes]:
        """Next message, or None on timeout."""
        try:
            return self._queue.get(timeout=timeout)
        except queue.Empty:
            return None

    def close(self) -> None:
        self.closed = True


class MessageBus:
    """In-memory pub/sub fabric shared by the in-process and TCP front ends."""

    def __init__(self):
        self._lock = threading.Lock()
        self._subs: dict = {}  # topic -> list[Subscription]
        self.traffic_log: list = []  # (topic, bytes) of everything published

    def subscribe(self, subscriber_id: str, topic: str,
                  sink: Optional["queue.Queue"] = None) -> Subscription:
        validate_topic(topic)
        sub = Subscription(subscriber_id, topic, sink=sink)
        with self._lock:
            self._subs.setdefault(topic, []).append(sub)
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        sub.close()
        with self._lock:
            subs = self._subs.get(sub.topic, [])
            if sub in subs:
                subs.remove(sub)

    def publish(self, topic: str, data: bytes) -> int:
        """Deliver to every current subscriber; returns the receiver count."""
        validate_topic(topic)
        with self._lock:
            targets = list(self._subs.get(topic, []))
            self.traffic_log.append((topic, data))
        for sub in targets:
            sub.deliver(data)
        return len(targets)


class BlobStore:
    """On-disk store keyed by SHA-256 of the content; write-then-rename."""

    def __init__(self, root, size_cap_bytes: Optional[int] = None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.size_cap_bytes = size_cap_bytes
        self._lock = threading.Lock()

    def put(self, data: bytes) -> str:
        if not data:
            raise EmptyBlob("refusing to store an empty blob")
        blob_id = hashlib.sha256(data).hexdigest()
        path = self.root / blob_id
        with self._lock:
            if path.is_file():
                return blob_id
            if self.size_cap_bytes is not None:
                used = sum(p.stat().st_size for p in self.root.iterdir()
                           if p.is_file())
                if used + len(data) > self.size_cap_bytes:
                    raise StoreFull(
                        f"store cap {self.size_cap_bytes} bytes exceeded")
            atomic_write_bytes(path, data)
        return blob_id

    def get(self, blob_id: str) -> bytes:
        path = self.root / blob_id
        if not _valid_blob_id(blob_id) or not path.is_file():
            raise BlobNotFound(f"no blob {blob_id!r}")
        data = path.read_bytes()
        if hashlib.sha256(data).hexdigest() != blob_id:
            raise BlobIntegrityError(f"blob {blob_id} failed its content hash")
        return data


def _valid_blob_id(blob_id: str) -> bool:
    return (isinstance(blob_id, str) and len(blob_id) == 64
            and all(c in "0123456789abcdef" for c in blob_id))
