"""Newline-delimited JSON bridge for external viewers.

One JSON object per delivered message::

    {"seq": 7, "stamp_ns": 700000000, "type": "labeled_cloud",
     "frame_id": "lidar", "count": 2,
     "points": [[x, y, z, class, instance], ...]}

Clients may connect and leave at any time. Each client has its own bounded
send buffer governed by the pipeline's drop policy, so a slow client in
drop-oldest mode only loses its own messages.
"""

from __future__ import annotations

import errno
import json
import logging
import socket
import threading

import numpy as np

from .errors import LidarSRError
from .pipeline import Channel, Sink, StampedMessage
from .rangeview import PointCloud

logger = logging.getLogger(__name__)


class StreamError(LidarSRError, OSError):
    """The stream endpoint could not be opened."""


def encode_message(msg: StampedMessage, decimals: int = 4) -> bytes:
    """Serialize one message as a single JSON line (with trailing newline)."""
    doc = {"seq": msg.seq, "stamp_ns": int(msg.stamp), "type": msg.type}
    p = msg.payload
    if isinstance(p, PointCloud):
        n = len(p)
        cls = p.labels if p.labels is not None else np.zeros(n, dtype=np.uint16)
        inst = p.instances if p.instances is not None else np.zeros(n, dtype=np.uint16)
        xyz = np.round(np.asarray(p.xyz, dtype=np.float64), decimals).tolist()
        doc["frame_id"] = p.frame_id
        doc["count"] = n
        doc["points"] = [[x, y, z, c, i] for (x, y, z), c, i in zip(xyz, cls.tolist(), inst.tolist())]
    return (json.dumps(doc, separators=(",", ":")) + "\n").encode("utf-8")


class _Client:
    def __init__(self, conn: socket.socket, addr, capacity: int, policy: str):
        self.conn = conn
        self.addr = addr
        self.buffer = Channel(f"client{addr}", capacity, policy)
        self.alive = True
        self.thread = threading.Thread(target=self._run, daemon=True, name=f"stream-client{addr}")

    def _run(self):
        try:
            while (line := self.buffer.get()) is not None:
                self.conn.sendall(line)
        except OSError:
            pass
        finally:
            self.alive = False
            self.buffer.abort()
            try:
                self.conn.close()
            except OSError:
                pass


class StreamServer(Sink):
    """TCP server that fans delivered messages out to every connected client.

    Serialization only happens while at least one client is connected.
    """

    name = "stream"

    def __init__(self, port: int = 0, host: str = "127.0.0.1", capacity: int = 2, drop_policy: str = "drop-oldest"):
        self.host = host
        self.requested_port = port
        self.capacity = capacity
        self.drop_policy = drop_policy
        self._clients: list[_Client] = []
        self._seen: list[_Client] = []
        self._lock = threading.Lock()
        self._sock: socket.socket | None = None
        self._accept_thread: threading.Thread | None = None
        self._stopping = threading.Event()
        self.sent = 0

    @property
    def port(self) -> int:
        if self._sock is None:
            raise StreamError("server not started")
        return self._sock.getsockname()[1]

    def start(self):
        if self._sock is not None:
            return
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        try:
            sock.bind((self.host, self.requested_port))
        except OSError as e:
            sock.close()
            if e.errno == errno.EADDRINUSE:
                raise StreamError(f"port {self.requested_port} is already in use") from e
            raise StreamError(f"cannot bind {self.host}:{self.requested_port}: {e}") from e
        sock.listen(8)
        sock.settimeout(0.1)
        self._sock = sock
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True, name="stream-accept")
        self._accept_thread.start()
        logger.info("stream server listening on %s:%d", self.host, self.port)

    def _accept_loop(self):
        while not self._stopping.is_set():
            try:
                conn, addr = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            conn.setblocking(True)
            client = _Client(conn, addr, self.capacity, self.drop_policy)
            client.thread.start()
            with self._lock:
                self._clients.append(client)
                self._seen.append(client)

    @property
    def n_clients(self) -> int:
        with self._lock:
            self._clients = [c for c in self._clients if c.alive]
            return len(self._clients)

    def client_stats(self) -> list[dict]:
        """Send-buffer accounting for every client seen so far, in connect order."""
        with self._lock:
            return [dict(c.buffer.stats(), address=list(c.addr)) for c in self._seen]

    def handle(self, msg: StampedMessage):
        with self._lock:
            clients = [c for c in self._clients if c.alive]
            self._clients = clients
        if not clients:
            return
        line = encode_message(msg)
        for c in clients:
            c.buffer.put(line)
        self.sent += 1

    def stop(self):
        self._stopping.set()
        with self._lock:
            clients = list(self._clients)
        for c in clients:
            c.buffer.close()
        for c in clients:
            c.thread.join(timeout=5)
        if self._accept_thread is not None:
            self._accept_thread.join(timeout=1)
        if self._sock is not None:
            self._sock.close()
            self._sock = None

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, *exc):
        self.stop()


def serve_stream(port: int = 0, host: str = "127.0.0.1", capacity: int = 2, drop_policy: str = "drop-oldest") -> StreamServer:
    """Open the endpoint now and return it, ready to be used as a graph sink."""
    server = StreamServer(port, host, capacity, drop_policy)
    server.start()
    return server


def read_stream(host: str, port: int, max_messages: int | None = None, timeout: float = 10.0):
    """Minimal client: yield decoded JSON objects from a stream endpoint."""
    with socket.create_connection((host, port), timeout=timeout) as s:
        f = s.makefile("rb")
        n = 0
        for line in f:
            yield json.loads(line)
            n += 1
            if max_messages is not None and n >= max_messages:
                break
