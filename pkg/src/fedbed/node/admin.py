"""Client for the node admin API (same framed-JSON wire as the broker)."""

from __future__ import annotations

import json
import socket
import threading

from ..broker.wire import recv_frame, send_frame
from ..errors import BrokerUnavailable, error_for_code


class AdminClient:
    def __init__(self, host: str, port: int, connect_timeout: float = 5.0):
        self.host = host
        self.port = port
        self.connect_timeout = connect_timeout
        self._lock = threading.Lock()
        self._sock = None

    def _conn(self) -> socket.socket:
        if self._sock is None:
            try:
                self._sock = socket.create_connection(
                    (self.host, self.port), timeout=self.connect_timeout)
                self._sock.settimeout(None)
            except OSError as exc:
                raise BrokerUnavailable(
                    f"cannot reach node admin API at "
                    f"{self.host}:{self.port}: {exc}") from exc
        return self._sock

    def call(self, **request) -> dict:
        with self._lock:
            sock = self._conn()
            try:
                send_frame(sock, json.dumps(request).encode("utf-8"))
                reply = recv_frame(sock)
            except BrokerUnavailable:
                self._sock = None
                raise
        if reply is None:
            self._sock = None
            raise BrokerUnavailable("admin connection closed")
        doc = json.loads(reply.decode("utf-8"))
        if not doc.get("ok", False):
            err = doc.get("error", {})
            raise error_for_code(err.get("code", "FedbedError"),
                                 err.get("message", "admin command failed"))
        return doc

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None
