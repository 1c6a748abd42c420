"""Schedulers that connect the two endpoints.

* :func:`run_inproc` interleaves both coroutines deterministically in one
  thread.
* :func:`run_threaded` runs them as concurrent actors over a transport pair
  (in-memory queues or a loopback TCP connection).
* :func:`run_endpoint` drives one endpoint over a socket, for the two-process
  mode of the command line.

Every frame goes through the wire encoder and decoder in all modes.
"""
from __future__ import annotations

import queue
import socket
import threading
from collections import deque
from typing import Optional

from ..wire import ClassicalMessage, FrameReader, MessageType, RestartReason, decode_frame, encode_frame
from .actors import RECV, Alice, Bob, Send
from .state import ActorResult, SessionConfig

_SHUTDOWN = ClassicalMessage(MessageType.RESTART, bytes([RestartReason.SHUTDOWN]))
_PEER = {"alice": "bob", "bob": "alice"}


class SchedulerError(RuntimeError):
    pass


def make_endpoints(cfg: SessionConfig) -> dict:
    return {"alice": Alice(cfg), "bob": Bob(cfg)}


def run_inproc(cfg: SessionConfig, transcript: Optional[list] = None,
               endpoints: Optional[dict] = None) -> tuple[ActorResult, ActorResult]:
    """Round-robin interleaving: each endpoint runs until it blocks on an empty inbox."""
    endpoints = endpoints or make_endpoints(cfg)
    gens = {k: e.run() for k, e in endpoints.items()}
    inbox = {k: deque() for k in gens}
    waiting = {k: False for k in gens}
    results: dict[str, ActorResult] = {}

    def step(name: str) -> bool:
        progressed = False
        value = None
        while True:
            if waiting[name]:
                if not inbox[name]:
                    return progressed
                value = decode_frame(inbox[name].popleft())
                waiting[name] = False
            try:
                op = gens[name].send(value)
            except StopIteration as stop:
                results[name] = stop.value
                return True
            progressed = True
            value = None
            if op is RECV:
                waiting[name] = True
            elif isinstance(op, Send):
                frame = encode_frame(op.msg)
                if transcript is not None:
                    transcript.append((name, frame))
                inbox[_PEER[name]].append(frame)
            else:
                raise SchedulerError(f"unknown operation {op!r}")

    while len(results) < 2:
        moved = False
        for name in ("alice", "bob"):
            if name not in results:
                moved |= step(name)
        if not moved:
            # one side finished while the other still waits: tell it the peer is gone
            live = [n for n in gens if n not in results]
            if len(live) == 1 and waiting[live[0]]:
                inbox[live[0]].append(encode_frame(_SHUTDOWN))
                continue
            raise SchedulerError("deadlock: both endpoints wait for a message")
    return results["alice"], results["bob"]


class QueueTransport:
    def __init__(self, outbox: queue.Queue, inbox: queue.Queue):
        self.outbox, self.inbox = outbox, inbox

    @classmethod
    def pair(cls) -> tuple["QueueTransport", "QueueTransport"]:
        a, b = queue.Queue(), queue.Queue()
        return cls(a, b), cls(b, a)

    def send(self, frame: bytes) -> None:
        self.outbox.put(frame)

    def recv(self) -> Optional[bytes]:
        return self.inbox.get()

    def close(self) -> None:
        self.outbox.put(None)


class SocketTransport:
    """Frames over a stream socket; ``recv`` returns None once the peer closes."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.reader = FrameReader()
        self._ready: deque = deque()

    def send(self, frame: bytes) -> None:
        self.sock.sendall(frame)

    def recv(self) -> Optional[bytes]:
        while not self._ready:
            chunk = self.sock.recv(1 << 16)
            if not chunk:
                return None
            self._ready.extend(encode_frame(m) for m in self.reader.feed(chunk))
        return self._ready.popleft()

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_WR)
        except OSError:
            pass


def drive(endpoint, transport, transcript: Optional[list] = None) -> ActorResult:
    """Run one endpoint against a transport until it finishes."""
    gen = endpoint.run()
    value = None
    try:
        while True:
            try:
                op = gen.send(value)
            except StopIteration as stop:
                return stop.value
            value = None
            if op is RECV:
                frame = transport.recv()
                value = decode_frame(frame) if frame is not None else _SHUTDOWN
            else:
                frame = encode_frame(op.msg)
                if transcript is not None:
                    transcript.append((endpoint.role, frame))
                transport.send(frame)
    finally:
        transport.close()


def run_threaded(cfg: SessionConfig, transport: str = "queue",
                 endpoints: Optional[dict] = None) -> tuple[ActorResult, ActorResult]:
    """Both endpoints as concurrent threads over queues or a loopback TCP connection."""
    endpoints = endpoints or make_endpoints(cfg)
    if transport == "queue":
        ta, tb = QueueTransport.pair()
        socks = []
    elif transport == "tcp":
        server = socket.create_server(("127.0.0.1", 0))
        port = server.getsockname()[1]
        client = socket.create_connection(("127.0.0.1", port))
        conn, _ = server.accept()
        server.close()
        socks = [client, conn]
        ta, tb = SocketTransport(conn), SocketTransport(client)
    else:
        raise ValueError(f"unknown transport {transport!r}")
    results: dict[str, ActorResult] = {}
    errors: list[BaseException] = []

    def work(name: str, tr) -> None:
        try:
            results[name] = drive(endpoints[name], tr)
        except BaseException as exc:  # surfaced in the caller
            errors.append(exc)
            tr.close()

    threads = [threading.Thread(target=work, args=("alice", ta), daemon=True),
               threading.Thread(target=work, args=("bob", tb), daemon=True)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for s in socks:
        s.close()
    if errors:
        raise errors[0]
    return results["alice"], results["bob"]


def run_endpoint(cfg: SessionConfig, role: str, host: str, port: int, listen: bool) -> ActorResult:
    """One endpoint of a two-process session over TCP."""
    endpoint = Alice(cfg) if role == "alice" else Bob(cfg)
    if listen:
        with socket.create_server((host, port)) as server:
            conn, _ = server.accept()
    else:
        conn = socket.create_connection((host, port), timeout=60)
        conn.settimeout(None)
    with conn:
        return drive(endpoint, SocketTransport(conn))
