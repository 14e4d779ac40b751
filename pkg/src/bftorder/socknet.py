"""Minimal real transport: length-prefixed canonical messages over TCP with
shared-key message authentication.

Exists for the demo CLI only; the simulator is the test substrate. Peers are
a static address table. Every frame is 4-byte big-endian length, canonical
message encoding, then a 32-byte HMAC-SHA256 authenticator under the
per-pair key, so a node can neither forge another sender's identity nor
tamper with frames in flight.
"""

from __future__ import annotations

import hashlib
import heapq
import hmac
import logging
import queue
import socket
import struct
import threading
from typing import Callable

from .codec import DecodeError
from .messages import ConsensusMessage, decode_message, encode_message
from .transport import MessageHandler, TimerHandle
from .types import NodeID

logger = logging.getLogger(__name__)

AUTH_SIZE = 32
_LEN = struct.Struct(">I")


def pair_key(master: bytes, a: NodeID, b: NodeID) -> bytes:
    lo, hi = sorted((a, b))
    return hmac.new(master, b"pair:%d:%d" % (lo, hi), hashlib.sha256).digest()


def frame(payload: bytes, key: bytes) -> bytes:
    auth = hmac.new(key, payload, hashlib.sha256).digest()
    return _LEN.pack(len(payload)) + payload + auth


def read_frame(sock: socket.socket, key: bytes) -> bytes | None:
    """Read one authenticated frame; None on EOF or a bad authenticator."""
    head = _read_exact(sock, _LEN.size)
    if head is None:
        return None
    (length,) = _LEN.unpack(head)
    body = _read_exact(sock, length + AUTH_SIZE)
    if body is None:
        return None
    payload, auth = body[:length], body[length:]
    if not hmac.compare_digest(auth, hmac.new(key, payload, hashlib.sha256).digest()):
        return None
    return payload


def _read_exact(sock: socket.socket, n: int) -> bytes | None:
    chunks = []
    while n:
        try:
            chunk = sock.recv(n)
        except OSError:
            return None
        if not chunk:
            return None
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


class SocketTransport:
    """Transport + scheduler for one node over real sockets and real time.

    Incoming messages and due timers are serialized through one dispatch
    thread, which is the node's protocol context.
    """

    def __init__(self, node_id: NodeID, peers: dict[NodeID, tuple[str, int]],
                 master_key: bytes) -> None:
        self.node_id = node_id
        self.peers = peers
        self.master_key = master_key
        self.handler: MessageHandler | None = None
        self._conns: dict[NodeID, socket.socket] = {}
        self._conn_lock = threading.Lock()
        self._inbox: queue.Queue = queue.Queue()
        self._timers: list[tuple[float, int, TimerHandle]] = []
        self._timer_lock = threading.Lock()
        self._timer_seq = 0
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._server: socket.socket | None = None

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> None:
        host, port = self.peers[self.node_id]
        self._server = socket.create_server((host, port))
        self._server.settimeout(0.2)
        self._threads = [
            threading.Thread(target=self._accept_loop, daemon=True),
            threading.Thread(target=self._dispatch_loop, daemon=True),
        ]
        for t in self._threads:
            t.start()

    def stop(self) -> None:
        self._stop.set()
        if self._server is not None:
            self._server.close()
        with self._conn_lock:
            for conn in self._conns.values():
                try:
                    conn.close()
                except OSError:
                    pass
            self._conns.clear()
        for t in self._threads:
            t.join(timeout=2.0)

    # -- scheduler ------------------------------------------------------------

    def now(self) -> float:
        import time

        return time.monotonic()

    def call_later(self, delay: float, fn: Callable[[], None]) -> TimerHandle:
        handle = TimerHandle(self.now() + delay, fn, 0)
        with self._timer_lock:
            self._timer_seq += 1
            heapq.heappush(self._timers, (handle.when, self._timer_seq, handle))
        return handle

    # -- sending ----------------------------------------------------------------

    def send(self, to: NodeID, message: ConsensusMessage) -> None:
        if to == self.node_id or to not in self.peers:
            return
        payload = encode_message(message)
        key = pair_key(self.master_key, self.node_id, to)
        data = frame(payload, key)
        try:
            conn = self._connect(to)
            conn.sendall(data)
        except OSError:
            with self._conn_lock:
                self._conns.pop(to, None)

    def broadcast(self, message: ConsensusMessage) -> None:
        for peer in self.peers:
            if peer != self.node_id:
                self.send(peer, message)

    def _connect(self, to: NodeID) -> socket.socket:
        with self._conn_lock:
            conn = self._conns.get(to)
            if conn is not None:
                return conn
            conn = socket.create_connection(self.peers[to], timeout=3.0)
            hello = frame(_LEN.pack(self.node_id) + b"hello",
                          pair_key(self.master_key, self.node_id, to))
            conn.sendall(hello)
            self._conns[to] = conn
            return conn

    # -- receiving -----------------------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _addr = self._server.accept()
            except (socket.timeout, OSError):
                continue
            threading.Thread(target=self._peer_loop, args=(conn,), daemon=True).start()

    def _peer_loop(self, conn: socket.socket) -> None:
        sender = self._handshake(conn)
        if sender is None:
            conn.close()
            return
        key = pair_key(self.master_key, self.node_id, sender)
        while not self._stop.is_set():
            payload = read_frame(conn, key)
            if payload is None:
                break
            try:
                message = decode_message(payload)
            except DecodeError:
                logger.warning("undecodable frame from %d", sender)
                continue
            self._inbox.put((sender, message))
        conn.close()

    def _handshake(self, conn: socket.socket) -> NodeID | None:
        head = _read_exact(conn, _LEN.size)
        if head is None:
            return None
        (length,) = _LEN.unpack(head)
        body = _read_exact(conn, length + AUTH_SIZE)
        if body is None or length < _LEN.size:
            return None
        payload, auth = body[:length], body[length:]
        (claimed,) = _LEN.unpack(payload[:_LEN.size])
        if claimed not in self.peers:
            return None
        key = pair_key(self.master_key, self.node_id, claimed)
        if not hmac.compare_digest(auth, hmac.new(key, payload, hashlib.sha256).digest()):
            logger.warning("rejecting connection claiming node %d: bad authenticator", claimed)
            return None
        return claimed

    def _dispatch_loop(self) -> None:
        while not self._stop.is_set():
            self._fire_due_timers()
            try:
                sender, message = self._inbox.get(timeout=0.02)
            except queue.Empty:
                continue
            if self.handler is not None:
                try:
                    self.handler(sender, message)
                except Exception:
                    logger.exception("handler failed for message from %d", sender)

    def _fire_due_timers(self) -> None:
        while True:
            with self._timer_lock:
                if not self._timers or self._timers[0][0] > self.now():
                    return
                _, _, handle = heapq.heappop(self._timers)
            if not handle.cancelled and self.handler is not None:
                try:
                    handle.fn()
                except Exception:
                    logger.exception("timer callback failed")
