"""Frame transports between agents.

Two interchangeable transports move length-framed byte payloads:

* ``inproc``, mailbox queues inside one process, one queue per agent.
* ``tcp``, length-framed byte streams over loopback/LAN sockets, with
  one lazily-established duplex connection per agent pair.

Both guarantee reliable delivery and FIFO ordering per (src, dst)
ordered pair; higher layers (the guard release protocol in particular)
depend on that ordering and are transport-agnostic otherwise.
"""

from __future__ import annotations

import json
import logging
import queue
import socket
import threading
from dataclasses import dataclass

from .wire import TruncatedFrame, read_frame, write_frame

logger = logging.getLogger("objrt.transport")

LAUNCHER_AGENT = 0  # reserved id: the launcher/registry service

INPROC = "inproc"
TCP = "tcp"
TRANSPORT_KINDS = (INPROC, TCP)


class TransportError(Exception):
    """Frame could not be handed to the destination."""


class StartupError(Exception):
    """Cluster bring-up failed; message names the offending agent."""


@dataclass(frozen=True)
class AgentAddress:
    """Where an agent can be reached: its id plus a transport locator."""

    agent: int
    endpoint: str


def parse_hostport(endpoint: str) -> tuple[str, int]:
    host, _, port = endpoint.rpartition(":")
    if not host:
        raise ValueError(f"not a host:port endpoint: {endpoint!r}")
    return host, int(port)


# --- control-plane helpers (cluster bootstrap, not agent traffic) ----------


def send_control(sock: socket.socket, message: dict) -> None:
    sock.sendall(write_frame(json.dumps(message).encode("utf-8")))


def recv_control(stream) -> dict | None:
    payload = read_frame(stream)
    if payload is None:
        return None
    return json.loads(payload.decode("utf-8"))


# --- in-process transport ---------------------------------------------------


class InprocFabric:
    """Mailbox table shared by every agent of one in-process cluster."""

    def __init__(self):
        self._queues: dict[int, queue.SimpleQueue] = {}

    def add_agent(self, agent_id: int) -> "InprocEndpoint":
        if agent_id in self._queues:
            raise StartupError(f"agent {agent_id} already exists in this fabric")
        q: queue.SimpleQueue = queue.SimpleQueue()
        self._queues[agent_id] = q
        return InprocEndpoint(self, agent_id, q)

    def endpoint_name(self, agent_id: int) -> str:
        return f"inproc:{agent_id}"

    def deliver(self, src: int, dst: int, frame: bytes):
        q = self._queues.get(dst)
        if q is None:
            raise TransportError(f"unknown destination agent {dst}")
        q.put((src, frame))


class InprocEndpoint:
    """One agent's view of an :class:`InprocFabric`."""

    def __init__(self, fabric: InprocFabric, agent_id: int, q: queue.SimpleQueue):
        self._fabric = fabric
        self.agent_id = agent_id
        self._queue = q
        self.endpoint = fabric.endpoint_name(agent_id)

    def send_frame(self, dst: int, frame: bytes) -> None:
        self._fabric.deliver(self.agent_id, dst, frame)

    def recv_frame(self) -> tuple[int, bytes] | None:
        """Block for the next frame; None signals orderly shutdown."""
        item = self._queue.get()
        return item

    def close(self) -> None:
        # Wake the dispatcher with the shutdown sentinel.
        self._queue.put(None)


# --- tcp transport ----------------------------------------------------------


class TcpEndpoint:
    """Socket transport for one agent.

    Listens on its own port; connections to peers are dialed on first
    send and then pinned, so each ordered pair's frames travel one
    socket in order. The first frame on any connection is a hello
    naming the dialing agent; everything after it is opaque payload.
    """

    def __init__(self, agent_id: int, listen: str = "127.0.0.1:0",
                 connect_timeout_ms: int = 5000):
        self.agent_id = agent_id
        self._connect_timeout = connect_timeout_ms / 1000.0
        host, port = parse_hostport(listen)
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(64)
        self.endpoint = "%s:%d" % self._listener.getsockname()
        self._peers: dict[int, str] = {}
        self._conns: dict[int, tuple[socket.socket, threading.Lock]] = {}
        self._conn_lock = threading.Lock()
        self._recv_q: queue.SimpleQueue = queue.SimpleQueue()
        self._closed = threading.Event()
        self._threads: list[threading.Thread] = []
        t = threading.Thread(target=self._accept_loop, name=f"tcp-accept-{agent_id}",
                             daemon=True)
        t.start()
        self._threads.append(t)

    def set_peers(self, addresses: dict[int, str]) -> None:
        self._peers.update(addresses)

    # -- sending

    def send_frame(self, dst: int, frame: bytes) -> None:
        sock, lock = self._get_conn(dst)
        try:
            with lock:
                sock.sendall(write_frame(frame))
        except OSError as exc:
            raise TransportError(f"send to agent {dst} failed: {exc}") from exc

    def _get_conn(self, dst: int) -> tuple[socket.socket, threading.Lock]:
        with self._conn_lock:
            conn = self._conns.get(dst)
            if conn is not None:
                return conn
        endpoint = self._peers.get(dst)
        if endpoint is None:
            raise TransportError(f"unknown destination agent {dst}")
        try:
            sock = socket.create_connection(parse_hostport(endpoint),
                                            timeout=self._connect_timeout)
        except OSError as exc:
            raise TransportError(f"cannot connect to agent {dst} at {endpoint}: {exc}") from exc
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        try:
            sock.sendall(write_frame(json.dumps({"hello": self.agent_id}).encode("utf-8")))
        except OSError as exc:
            sock.close()
            raise TransportError(f"handshake with agent {dst} failed: {exc}") from exc
        with self._conn_lock:
            # Lost a dial race: keep the registered connection, drop ours.
            existing = self._conns.get(dst)
            if existing is not None:
                sock.close()
                return existing
            conn = (sock, threading.Lock())
            self._conns[dst] = conn
        self._start_reader(sock, dst)
        return conn

    # -- receiving

    def recv_frame(self) -> tuple[int, bytes] | None:
        item = self._recv_q.get()
        return item

    def _accept_loop(self):
        while not self._closed.is_set():
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            t = threading.Thread(target=self._handshake_inbound, args=(sock,),
                                 name=f"tcp-hello-{self.agent_id}", daemon=True)
            t.start()

    def _handshake_inbound(self, sock: socket.socket):
        stream = sock.makefile("rb")
        try:
            hello = recv_control(stream)
        except (TruncatedFrame, ValueError, OSError):
            sock.close()
            return
        if not hello or "hello" not in hello:
            sock.close()
            return
        peer = int(hello["hello"])
        with self._conn_lock:
            if peer not in self._conns:
                self._conns[peer] = (sock, threading.Lock())
        self._read_loop(stream, peer, sock)

    def _start_reader(self, sock: socket.socket, peer: int):
        stream = sock.makefile("rb")
        t = threading.Thread(target=self._read_loop, args=(stream, peer, sock),
                             name=f"tcp-read-{self.agent_id}-{peer}", daemon=True)
        t.start()
        self._threads.append(t)

    def _read_loop(self, stream, peer: int, sock: socket.socket):
        while True:
            try:
                frame = read_frame(stream)
            except (TruncatedFrame, OSError):
                frame = None
            if frame is None:
                if not self._closed.is_set():
                    logger.debug("agent %d: connection from %d closed", self.agent_id, peer)
                return
            self._recv_q.put((peer, frame))

    def close(self) -> None:
        self._closed.set()
        try:
            # shutdown wakes the blocked accept(); close alone leaves the
            # open file description listening while the syscall holds it
            self._listener.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self._listener.close()
        except OSError:
            pass
        with self._conn_lock:
            conns = list(self._conns.values())
            self._conns.clear()
        for sock, _ in conns:
            try:
                sock.close()
            except OSError:
                pass
        self._recv_q.put(None)
