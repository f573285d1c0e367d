"""Broker clients: in-process (tests, demo) and TCP (deployments).

Both expose the same surface, so nodes and researchers are transport
agnostic. Subscriptions yield raw envelope bytes; decoding happens at the
consuming edge, which owns the error handling.
"""

from __future__ import annotations

import json
import socket
import threading
from typing import Optional

from .. import protocol
from ..errors import (
    BlobNotFound,
    BrokerUnavailable,
    EmptyBlob,
    error_for_code,
)
from .core import BlobStore, MessageBus, Subscription, validate_topic
from .wire import recv_frame, send_frame


class BrokerClient:
    """Interface: publish/subscribe envelopes, upload/download blobs."""

    def publish(self, topic: str, envelope: protocol.MessageEnvelope) -> None:
        raise NotImplementedError

    def publish_bytes(self, topic: str, data: bytes) -> None:
        raise NotImplementedError

    def subscribe(self, subscriber_id: str, topic: str) -> Subscription:
        raise NotImplementedError

    def upload_blob(self, data: bytes) -> str:
        raise NotImplementedError

    def download_blob(self, blob_id: str) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        pass


class LocalBroker:
    """One bus + blob store shared by in-process clients."""

    def __init__(self, store_dir, size_cap_bytes: Optional[int] = None):
        self.bus = MessageBus()
        self.blobs = BlobStore(store_dir, size_cap_bytes)

    def make_client(self) -> "LocalBrokerClient":
        return LocalBrokerClient(self)


class LocalBrokerClient(BrokerClient):
    def __init__(self, broker: LocalBroker):
        self._broker = broker
        self._subs: list = []

    def publish(self, topic: str, envelope: protocol.MessageEnvelope) -> None:
        self.publish_bytes(topic, protocol.encode(envelope))

    def publish_bytes(self, topic: str, data: bytes) -> None:
        self._broker.bus.publish(topic, data)

    def subscribe(self, subscriber_id: str, topic: str) -> Subscription:
        sub = self._broker.bus.subscribe(subscriber_id, topic)
        self._subs.append(sub)
        return sub

    def upload_blob(self, data: bytes) -> str:
        return self._broker.blobs.put(data)

    def download_blob(self, blob_id: str) -> bytes:
        return self._broker.blobs.get(blob_id)

    def close(self) -> None:
        for sub in self._subs:
            self._broker.bus.unsubscribe(sub)
        self._subs.clear()


class TcpBrokerClient(BrokerClient):
    """Speaks the broker's two listener ports.

    Control connections carry length-prefixed frames: a JSON command frame
    opens the exchange ({"cmd": "subscribe", ...} or {"cmd": "publish", ...});
    encoded envelopes travel as their own frames. Blob frames are
    ``PUT\\n<bytes>`` / ``GET\\n<hex>`` requests.

    Every endpoint this client dials is recorded in ``dialed_endpoints`` so
    integration tests can assert the star topology.
    """

    def __init__(self, host: str, ctrl_port: int, blob_port: int,
                 connect_timeout: float = 5.0):
        self.host = host
        self.ctrl_port = ctrl_port
        self.blob_port = blob_port
        self.connect_timeout = connect_timeout
        self.dialed_endpoints: list = []
        self._pub_lock = threading.Lock()
        self._pub_sock: Optional[socket.socket] = None
        self._blob_lock = threading.Lock()
        self._blob_sock: Optional[socket.socket] = None
        self._sub_threads: list = []
        self._sub_socks: list = []
        self._closed = False

    # -- connections --

    def _dial(self, port: int) -> socket.socket:
        try:
            sock = socket.create_connection((self.host, port),
                                            timeout=self.connect_timeout)
        except OSError as exc:
            raise BrokerUnavailable(
                f"cannot reach broker at {self.host}:{port}: {exc}") from exc
        sock.settimeout(None)
        self.dialed_endpoints.append((self.host, port))
        return sock

    def _publisher(self) -> socket.socket:
        if self._pub_sock is None:
            self._pub_sock = self._dial(self.ctrl_port)
        return self._pub_sock

    def _blob_conn(self) -> socket.socket:
        if self._blob_sock is None:
            self._blob_sock = self._dial(self.blob_port)
        return self._blob_sock

    # -- control plane --

    def publish(self, topic: str, envelope: protocol.MessageEnvelope) -> None:
        self.publish_bytes(topic, protocol.encode(envelope))

    def publish_bytes(self, topic: str, data: bytes) -> None:
        validate_topic(topic)
        with self._pub_lock:
            sock = self._publisher()
            try:
                send_frame(sock, json.dumps(
                    {"cmd": "publish", "topic": topic}).encode("utf-8"))
                send_frame(sock, data)
                reply = recv_frame(sock)
            except BrokerUnavailable:
                self._pub_sock = None
                raise
        _check_ok(reply)

    def subscribe(self, subscriber_id: str, topic: str) -> Subscription:
        validate_topic(topic)
        sock = self._dial(self.ctrl_port)
        send_frame(sock, json.dumps({
            "cmd": "subscribe",
            "subscriber_id": subscriber_id,
            "topics": [topic],
        }).encode("utf-8"))
        _check_ok(recv_frame(sock))
        sub = Subscription(subscriber_id, topic)
        thread = threading.Thread(target=self._pump, args=(sock, sub),
                                  name=f"sub-{subscriber_id}-{topic}", daemon=True)
        thread.start()
        self._sub_threads.append(thread)
        self._sub_socks.append(sock)
        return sub

    def _pump(self, sock: socket.socket, sub: Subscription) -> None:
        try:
            while not self._closed and not sub.closed:
                frame = recv_frame(sock)
                if frame is None:
                    break
                sub.deliver(frame)
        except Exception:
            pass
        finally:
            sub.close()
            try:
                sock.close()
            except OSError:
                pass

    # -- blob plane --

    def upload_blob(self, data: bytes) -> str:
        if not data:
            raise EmptyBlob("refusing to upload an empty blob")
        reply = self._blob_request(b"PUT\n" + data)
        if reply.startswith(b"ID\n"):
            return reply[3:].decode("ascii")
        raise _blob_error(reply)

    def download_blob(self, blob_id: str) -> bytes:
        reply = self._blob_request(b"GET\n" + blob_id.encode("ascii"))
        if reply.startswith(b"BLOB\n"):
            return reply[5:]
        if reply == b"NOT_FOUND\n":
            raise BlobNotFound(f"no blob {blob_id!r}")
        raise _blob_error(reply)

    def _blob_request(self, frame: bytes) -> bytes:
        with self._blob_lock:
            sock = self._blob_conn()
            try:
                send_frame(sock, frame)
                reply = recv_frame(sock)
            except BrokerUnavailable:
                self._blob_sock = None
                raise
        if reply is None:
            self._blob_sock = None
            raise BrokerUnavailable("blob connection closed by broker")
        return reply

    def close(self) -> None:
        self._closed = True
        for sock in [self._pub_sock, self._blob_sock, *self._sub_socks]:
            if sock is not None:
                try:
                    sock.close()
                except OSError:
                    pass
        self._pub_sock = None
        self._blob_sock = None


def _check_ok(reply: Optional[bytes]) -> None:
    if reply is None:
        raise BrokerUnavailable("broker closed the connection")
    try:
        doc = json.loads(reply.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BrokerUnavailable(f"bad broker reply: {exc}") from exc
    if not doc.get("ok", False):
        err = doc.get("error", {})
        raise error_for_code(err.get("code", "BrokerUnavailable"),
                             err.get("message", "broker refused the command"))


def _blob_error(reply: bytes):
    if reply.startswith(b"ERR\n"):
        head, _, message = reply[4:].decode("utf-8", "replace").partition("\n")
        return error_for_code(head, message)
    return BrokerUnavailable(f"unexpected blob reply {reply[:32]!r}")
