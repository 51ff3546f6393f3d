"""Loopback TCP adapters for the session protocol.

The simulator normally moves protocol bytes through the in-memory cloud; the
adapters here run the same codecs over real sockets so the framing can be
exercised end to end outside the simulation.
"""

from __future__ import annotations

import socket
import threading

from .errors import ProtocolViolation
from .target import BackendStore
from .wire import HandshakeClient, HandshakeServer


class DatabaseTcpServer:
    """Serves the session protocol on a loopback port, executing commands
    against a BackendStore.  One thread, sequential connections."""

    def __init__(self, store: BackendStore, host: str = "127.0.0.1"):
        self.store = store
        self._sock = socket.create_server((host, 0))
        self.host, self.port = self._sock.getsockname()[:2]
        self._thread: threading.Thread | None = None
        self._stopping = False
        self._active: socket.socket | None = None

    def __enter__(self) -> "DatabaseTcpServer":
        self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.stop()

    def start(self) -> None:
        self._thread = threading.Thread(target=self._serve, daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stopping = True
        # close alone does not wake a thread blocked in accept; shutdown does
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self._sock.close()
        except OSError:
            pass
        active = self._active
        if active is not None:
            # the serve thread may be blocked in recv on this connection;
            # shutdown wakes it so join cannot hang
            try:
                active.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        if self._thread is not None:
            self._thread.join(timeout=5.0)

    def _serve(self) -> None:
        while not self._stopping:
            try:
                conn, _addr = self._sock.accept()
            except OSError:
                return
            self._active = conn
            try:
                with conn:
                    self._serve_connection(conn)
            finally:
                self._active = None

    def _serve_connection(self, conn: socket.socket) -> None:
        server = HandshakeServer()
        conn.sendall(server.start())
        try:
            while True:
                data = conn.recv(4096)
                if not data:
                    return
                out, events = server.feed(data)
                if out:
                    conn.sendall(out)
                for event in events:
                    if event[0] != "request":
                        continue
                    _tag, corr, payload = event
                    response = self.store.execute(corr, payload)
                    conn.sendall(server.respond(corr, response))
                    return
        except ProtocolViolation:
            return


def query_database(host: str, port: int, correlation_id: bytes,
                   payload: bytes, timeout: float = 5.0) -> bytes:
    """One full handshake + request/response round trip over TCP."""
    client = HandshakeClient(correlation_id, payload)
    with socket.create_connection((host, port), timeout=timeout) as conn:
        while True:
            data = conn.recv(4096)
            if not data:
                raise ProtocolViolation("connection closed mid-session")
            out, events = client.feed(data)
            if out:
                conn.sendall(out)
            for event in events:
                if event[0] == "response":
                    return event[2]
