"""Frame transport: length-prefixed frames over TCP, plus an in-process
variant for high-volume statistical runs.

A frame is a 4-byte big-endian length followed by the signed message body.
Parties address each other by "host:port" strings; the local transport
uses the same interface but dispatches synchronously to registered
handlers, keeping the full message path (bytes, signatures, verification)
while skipping the sockets.
"""

from __future__ import annotations

import logging
import socket
import struct
import threading
from typing import Callable, Optional

from .errors import TransportError

log = logging.getLogger("psfe.transport")

MAX_FRAME = 64 * 1024 * 1024
# Handlers return reply frames for the same connection.
FrameHandler = Callable[[bytes], list[bytes]]


def write_frame(sock: socket.socket, body: bytes) -> None:
    sock.sendall(struct.pack(">I", len(body)) + body)


def read_frame(sock: socket.socket) -> Optional[bytes]:
    """One frame, or None on orderly EOF before a length prefix."""
    header = _read_exact(sock, 4)
    if header is None:
        return None
    (length,) = struct.unpack(">I", header)
    if length > MAX_FRAME:
        raise TransportError(f"frame of {length} bytes exceeds limit")
    body = _read_exact(sock, length)
    if body is None:
        raise TransportError("connection closed mid-frame")
    return body


def _read_exact(sock: socket.socket, n: int) -> Optional[bytes]:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None if not buf else None
        buf += chunk
    return buf


def parse_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise TransportError(f"bad address {address!r}, expected host:port")
    return host, int(port)


class Transport:
    """Delivery interface the parties use; see TcpTransport and LocalTransport."""

    def send(self, address: str, body: bytes) -> None:
        raise NotImplementedError

    def request(self, address: str, body: bytes, timeout: float = 10.0) -> bytes:
        raise NotImplementedError


class TcpTransport(Transport):
    def send(self, address: str, body: bytes) -> None:
        host, port = parse_address(address)
        try:
            with socket.create_connection((host, port), timeout=10.0) as sock:
                write_frame(sock, body)
        except OSError as exc:
            raise TransportError(f"send to {address} failed: {exc}") from exc

    def request(self, address: str, body: bytes, timeout: float = 10.0) -> bytes:
        host, port = parse_address(address)
        try:
            with socket.create_connection((host, port), timeout=timeout) as sock:
                write_frame(sock, body)
                reply = read_frame(sock)
        except OSError as exc:
            raise TransportError(f"request to {address} failed: {exc}") from exc
        if reply is None:
            raise TransportError(f"no reply from {address}")
        return reply


class LocalTransport(Transport):
    """Synchronous in-process delivery between registered handlers."""

    def __init__(self):
        self._handlers: dict[str, FrameHandler] = {}

    def register(self, address: str, handler: FrameHandler) -> None:
        self._handlers[address] = handler

    def _dispatch(self, address: str, body: bytes) -> list[bytes]:
        try:
            handler = self._handlers[address]
        except KeyError:
            raise TransportError(f"nothing registered at {address}") from None
        return handler(body)

    def send(self, address: str, body: bytes) -> None:
        self._dispatch(address, body)

    def request(self, address: str, body: bytes, timeout: float = 10.0) -> bytes:
        replies = self._dispatch(address, body)
        if not replies:
            raise TransportError(f"no reply from {address}")
        return replies[0]


class FrameServer:
    """Threaded TCP listener feeding frames to a handler.

    Bind to port 0 for an ephemeral port; ``address`` reports the bound one.
    """

    def __init__(self, handler: FrameHandler, host: str = "127.0.0.1", port: int = 0):
        self._handler = handler
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(64)
        self._host, self._port = self._sock.getsockname()
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._serve, daemon=True)

    @property
    def address(self) -> str:
        return f"{self._host}:{self._port}"

    def start(self) -> "FrameServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass
        self._thread.join(timeout=2.0)

    def _serve(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except OSError:
                break
            threading.Thread(
                target=self._serve_connection, args=(conn,), daemon=True
            ).start()

    def _serve_connection(self, conn: socket.socket) -> None:
        with conn:
            while True:
                try:
                    body = read_frame(conn)
                except TransportError as exc:
                    log.warning("dropping connection: %s", exc)
                    return
                if body is None:
                    return
                try:
                    replies = self._handler(body)
                except Exception:
                    log.exception("handler failed; closing connection")
                    return
                try:
                    for reply in replies:
                        write_frame(conn, reply)
                except OSError as exc:
                    log.warning("reply failed: %s", exc)
                    return
