"""Length-prefixed framing: 4-byte big-endian byte count, then the payload."""

from __future__ import annotations

import socket
import struct
from typing import Optional

from ..errors import BrokerUnavailable, MalformedMessage

MAX_FRAME_BYTES = 256 * 1024 * 1024


def send_frame(sock: socket.socket, payload: bytes) -> None:
    if len(payload) > MAX_FRAME_BYTES:
        raise MalformedMessage(f"frame too large: {len(payload)} bytes")
    try:
        sock.sendall(struct.pack(">I", len(payload)) + payload)
    except OSError as exc:
        raise BrokerUnavailable(f"send failed: {exc}") from exc


def recv_frame(sock: socket.socket) -> Optional[bytes]:
    """One frame, or None on clean EOF at a frame boundary."""
    header = _recv_exact(sock, 4)
    if header is None:
        return None
    (length,) = struct.unpack(">I", header)
    if length > MAX_FRAME_BYTES:
        raise MalformedMessage(f"frame too large: {length} bytes")
    payload = _recv_exact(sock, length)
    if payload is None:
        raise MalformedMessage("truncated frame")
    return payload


def _recv_exact(sock: socket.socket, n: int) -> Optional[bytes]:
    chunks = []
    remaining = n
    while remaining > 0:
        try:
            chunk = sock.recv(remaining)
        except OSError as exc:
            raise BrokerUnavailable(f"recv failed: {exc}") from exc
        if not chunk:
            return None if not chunks else _truncated()
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def _truncated():
    raise MalformedMessage("connection closed mid-frame")
