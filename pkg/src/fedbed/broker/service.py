"""The standalone broker service: control listener + blob listener.

Both listeners serve many concurrent connections; publishes are serialized
per topic by the bus lock, blob writes are atomic per blob id.
"""

from __future__ import annotations

import json
import logging
import queue
import socket
import socketserver
import threading
from typing import Optional

from ..errors import FedbedError, InvalidTopic
from .core import BlobStore, MessageBus, validate_topic
from .wire import recv_frame, send_frame

log = logging.getLogger(__name__)

DEFAULT_CTRL_PORT = 14150
DEFAULT_BLOB_PORT = 14151


class _ThreadingServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class BrokerService:
    def __init__(self, store_dir, ctrl_port: int = DEFAULT_CTRL_PORT,
                 blob_port: int = DEFAULT_BLOB_PORT,
                 size_cap_bytes: Optional[int] = None, host: str = "127.0.0.1"):
        self.bus = MessageBus()
        self.blobs = BlobStore(store_dir, size_cap_bytes)
        self.host = host
        service = self

        class CtrlHandler(socketserver.BaseRequestHandler):
            def handle(self):
                service._handle_ctrl(self.request)

        class BlobHandler(socketserver.BaseRequestHandler):
            def handle(self):
                service._handle_blob(self.request)

        self._ctrl_server = _ThreadingServer((host, ctrl_port), CtrlHandler)
        self._blob_server = _ThreadingServer((host, blob_port), BlobHandler)
        self.ctrl_port = self._ctrl_server.server_address[1]
        self.blob_port = self._blob_server.server_address[1]
        self._threads: list = []

    def start(self) -> None:
        for server, name in ((self._ctrl_server, "broker-ctrl"),
                             (self._blob_server, "broker-blob")):
            thread = threading.Thread(target=server.serve_forever,
                                      name=name, daemon=True)
            thread.start()
            self._threads.append(thread)
        log.info("broker listening: ctrl=%s blob=%s", self.ctrl_port, self.blob_port)

    def stop(self) -> None:
        for server in (self._ctrl_server, self._blob_server):
            server.shutdown()
            server.server_close()

    # -- control connections --

    def _handle_ctrl(self, sock: socket.socket) -> None:
        try:
            first = recv_frame(sock)
        except FedbedError:
            return
        if first is None:
            return
        command = _parse_command(first)
        if command is None or command.get("cmd") not in ("subscribe", "publish"):
            _send_error(sock, "MalformedMessage",
                        "first frame must be a subscribe or publish command")
            return
        if command["cmd"] == "subscribe":
            self._serve_subscriber(sock, command)
        else:
            self._serve_publisher(sock, command)

    def _serve_subscriber(self, sock: socket.socket, command: dict) -> None:
        subscriber_id = command.get("subscriber_id", "")
        topics = command.get("topics", [])
        if not subscriber_id or not topics:
            _send_error(sock, "MalformedMessage",
                        "subscribe needs subscriber_id and topics")
            return
        sink: "queue.Queue[bytes]" = queue.Queue()
        subs = []
        try:
            for topic in topics:
                subs.append(self.bus.subscribe(subscriber_id, topic, sink=sink))
        except InvalidTopic as exc:
            for sub in subs:
                self.bus.unsubscribe(sub)
            _send_error(sock, exc.code, exc.message)
            return
        try:
            send_frame(sock, b'{"ok":true}')
            sock.settimeout(0.2)
            while True:
                try:
                    data = sink.get(timeout=0.2)
                except queue.Empty:
                    data = None
                if data is not None:
                    send_frame(sock, data)
                    continue
                # detect a departed subscriber so the bus can forget it
                try:
                    probe = sock.recv(1, socket.MSG_PEEK)
                    if probe == b"":
                        break
                except socket.timeout:
                    continue
                except OSError:
                    break
        except FedbedError:
            pass
        finally:
            for sub in subs:
                self.bus.unsubscribe(sub)
            _close(sock)

    def _serve_publisher(self, sock: socket.socket, first_command: dict) -> None:
        command = first_command
        try:
            while True:
                topic = command.get("topic")
                envelope = recv_frame(sock)
                if envelope is None:
                    return
                try:
                    validate_topic(topic)
                    receivers = self.bus.publish(topic, envelope)
                    send_frame(sock, json.dumps(
                        {"ok": True, "receivers": receivers}).encode("utf-8"))
                except InvalidTopic as exc:
                    _send_error(sock, exc.code, exc.message)
                frame = recv_frame(sock)
                if frame is None:
                    return
                command = _parse_command(frame)
                if command is None or command.get("cmd") != "publish":
                    _send_error(sock, "MalformedMessage",
                                "expected a publish command frame")
                    return
        except FedbedError:
            return
        finally:
            _close(sock)

    # -- blob connections --

    def _handle_blob(self, sock: socket.socket) -> None:
        try:
            while True:
                frame = recv_frame(sock)
                if frame is None:
                    return
                send_frame(sock, self._blob_reply(frame))
        except FedbedError:
            return
        finally:
            _close(sock)

    def _blob_reply(self, frame: bytes) -> bytes:
        try:
            if frame.startswith(b"PUT\n"):
                blob_id = self.blobs.put(frame[4:])
                return b"ID\n" + blob_id.encode("ascii")
            if frame.startswith(b"GET\n"):
                blob_id = frame[4:].decode("ascii", "replace")
                try:
                    return b"BLOB\n" + self.blobs.get(blob_id)
                except FedbedError as exc:
                    if exc.code == "BlobNotFound":
                        return b"NOT_FOUND\n"
                    raise
            return b"ERR\nMalformedMessage\nunknown blob command"
        except FedbedError as exc:
            return b"ERR\n" + exc.code.encode("ascii") + b"\n" + \
                exc.message.encode("utf-8", "replace")


def _parse_command(frame: bytes) -> Optional[dict]:
    try:
        doc = json.loads(frame.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        return None
    return doc if isinstance(doc, dict) else None


def _send_error(sock: socket.socket, code: str, message: str) -> None:
    try:
        send_frame(sock, json.dumps(
            {"ok": False, "error": {"code": code, "message": message}}
        ).encode("utf-8"))
    except FedbedError:
        pass


def _close(sock: socket.socket) -> None:
    try:
        sock.close()
    except OSError:
        pass
