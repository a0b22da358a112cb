"""Wire framing: 4-byte big-endian length prefix + UTF-8 JSON document.

One frame carries one document. The same framing is used for every bus
session and for the console's event bridge, so both ends of any socket
in the system speak the helpers below.
"""

from __future__ import annotations

import json
import socket
import struct

from .errors import FrameError

MAX_FRAME_BYTES = 4 * 1024 * 1024


def write_frame(sock: socket.socket, doc: dict) -> None:
    """Serialize one document and send it with its length prefix."""
    data = json.dumps(doc, separators=(",", ":")).encode("utf-8")
    if len(data) > MAX_FRAME_BYTES:
        raise FrameError(f"frame of {len(data)} bytes exceeds {MAX_FRAME_BYTES} limit")
    sock.sendall(struct.pack(">I", len(data)) + data)


def read_frame(sock: socket.socket):
    """Read one document; returns None on clean end-of-stream."""
    header = _recv_exact(sock, 4)
    if header is None:
        return None
    (length,) = struct.unpack(">I", header)
    if length == 0:
        raise FrameError("zero-length frame")
    if length > MAX_FRAME_BYTES:
        raise FrameError(f"frame of {length} bytes exceeds {MAX_FRAME_BYTES} limit")
    body = _recv_exact(sock, length)
    if body is None:
        raise FrameError("connection closed mid-frame")
    try:
        return json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FrameError(f"unparseable frame: {exc}") from exc


def _recv_exact(sock, count):
    buf = bytearray()
    while len(buf) < count:
        chunk = sock.recv(count - len(buf))
        if not chunk:
            if not buf:
                return None
            raise FrameError("connection closed mid-frame")
        buf.extend(chunk)
    return bytes(buf)
