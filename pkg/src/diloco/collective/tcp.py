"""Stream-socket transport for :mod:`.protocol`.

Each peer listens on one port. Outgoing traffic uses one connection per
destination, opened lazily and introduced with a non-join HELLO; incoming
connections are read by one thread each. Frames that need no round context
are answered on the receiver thread; the rest are queued for the engine
thread, which drives the round generator with blocking receives.
"""

from __future__ import annotations

import logging
import os
import queue
import socket
import threading
import time
from dataclasses import replace

from ..errors import CollectiveError, ConfigError, JoinError
from ..tensor import PseudoGradient
from . import wire
from .membership import Membership, PeerInfo, heartbeat_tick
from .protocol import PeerProtocol, ProtocolSettings, Recv, Send, state_key

log = logging.getLogger(__name__)


def _read_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        part = sock.recv(n - len(buf))
        if not part:
            return None
        buf += part
    return bytes(buf)


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ConfigError(f"address must be host:port, got {addr!r}")
    return host, int(port)


class TcpEndpoint:
    def __init__(self, proto: PeerProtocol, host: str = "127.0.0.1", port: int = 0):
        self.proto = proto
        self.inbox: queue.Queue = queue.Queue()
        self._listener = socket.create_server((host, port))
        self.address = f"{host}:{self._listener.getsockname()[1]}"
        self._out: dict[bytes, socket.socket] = {}
        self._out_locks: dict[bytes, threading.Lock] = {}
        self._lock = threading.Lock()
        self._closed = threading.Event()
        self._readers: list[socket.socket] = []
        self.known: dict[bytes, str] = {}
        threading.Thread(target=self._accept_loop, daemon=True, name="diloco-accept").start()

    # -- sending ----------------------------------------------------------------

    def _connect(self, dst: bytes) -> tuple[socket.socket, threading.Lock]:
        with self._lock:
            if dst in self._out:
                return self._out[dst], self._out_locks[dst]
        info = self.proto.membership.get(dst)
        address = info.address if info is not None and info.address else self.known.get(dst)
        if not address:
            raise CollectiveError(f"no address for peer {dst.hex()[:8]}")
        sock = socket.create_connection(parse_address(address), timeout=5.0)
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        hello = wire.encode(wire.Hello(self.proto.run_id, self.proto.peer_id, self.address, False))
        sock.sendall(hello)
        with self._lock:
            if dst in self._out:
                sock.close()
            else:
                self._out[dst] = sock
                self._out_locks[dst] = threading.Lock()
            return self._out[dst], self._out_locks[dst]

    def send(self, dst: bytes, frame: bytes) -> bool:
        """Best effort: a dead destination just loses the frame."""
        if dst == self.proto.peer_id or self._closed.is_set():
            return False
        try:
            sock, lock = self._connect(dst)
            with lock:
                sock.sendall(frame)
            return True
        except (OSError, CollectiveError) as exc:
            log.debug("send to %s failed: %s", dst.hex()[:8], exc)
            with self._lock:
                sock = self._out.pop(dst, None)
            if sock is not None:
                sock.close()
            return False

    def send_to_address(self, addr: str, hello: bytes) -> None:
        """One-off HELLO to an address whose peer_id is not known yet."""
        with socket.create_connection(parse_address(addr), timeout=5.0) as sock:
            sock.sendall(hello)

    # -- receiving --------------------------------------------------------------

    def _accept_loop(self):
        while not self._closed.is_set():
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            self._readers.append(conn)
            threading.Thread(target=self._reader, args=(conn,), daemon=True, name="diloco-recv").start()

    def _reader(self, conn: socket.socket):
        src = None
        try:
            while not self._closed.is_set():
                head = _read_exact(conn, wire.HEADER_SIZE)
                if head is None:
                    return
                mtype, length = wire.decode_header(head)
                payload = _read_exact(conn, length)
                if payload is None:
                    return
                msg = wire.decode(head + payload)
                nbytes = len(head) + length
                if mtype == wire.HELLO:
                    self.known[msg.peer_id] = msg.address
                if mtype == wire.HELLO and not msg.join:
                    src = msg.peer_id
                    continue
                if src is None:
                    if mtype != wire.HELLO:
                        raise wire.WireError("first frame on a connection must be HELLO")
                    src = msg.peer_id
                replies = self.proto.background(src, msg, nbytes)
                if replies is None:
                    self.inbox.put((src, msg, nbytes))
                else:
                    for dst, frame in replies:
                        self.send(dst, frame)
        except (OSError, wire.WireError) as exc:
            log.debug("reader closed: %s", exc)
        finally:
            conn.close()

    def recv(self, deadline: float):
        timeout = max(0.0, deadline - time.monotonic())
        try:
            return self.inbox.get(timeout=timeout)
        except queue.Empty:
            return None

    def close(self):
        self._closed.set()
        try:
            self._listener.close()
        except OSError:
            pass
        with self._lock:
            socks = list(self._out.values()) + self._readers
            self._out.clear()
        for s in socks:
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            s.close()


def run_blocking(endpoint: TcpEndpoint, gen):
    """Drive a protocol generator over real sockets."""
    value = None
    while True:
        try:
            op = gen.send(value)
        except StopIteration as stop:
            return stop.value
        value = None
        if isinstance(op, Send):
            endpoint.send(op.dst, op.data)
        elif isinstance(op, Recv):
            value = endpoint.recv(op.deadline)
        else:
            raise TypeError(f"unexpected operation {op!r}")


class TcpCollective:
    """Blocking collective handle for one worker process.

    A background thread sends heartbeats and ages the membership; every
    public call runs on the engine thread.
    """

    def __init__(self, run_id: str, host: str = "127.0.0.1", port: int = 0,
                 settings: ProtocolSettings | None = None, peer_id: bytes | None = None,
                 heartbeat_interval: float = 0.25, suspect_after: float = 2.0,
                 evict_after: float = 6.0):
        self.peer_id = peer_id or os.urandom(16)
        self.settings = settings or ProtocolSettings()
        me = PeerInfo(self.peer_id, "", time.monotonic(), "live")
        members = Membership.create([me], quorum_min=self.settings.quorum_min)
        self.proto = PeerProtocol(self.peer_id, run_id, members, self.settings, clock=time.monotonic)
        self.endpoint = TcpEndpoint(self.proto, host, port)
        self.address = self.endpoint.address
        self.proto.address = self.address
        self.proto.update_membership(lambda m: Membership.create(
            [PeerInfo(self.peer_id, self.address, time.monotonic(), "live")], m.quorum_min))
        self.proto.alive_hint = self._alive
        self.heartbeat_interval = heartbeat_interval
        self.suspect_after = suspect_after
        self.evict_after = evict_after
        self.reports: list = []
        self._stop = threading.Event()
        self._hb = threading.Thread(target=self._heartbeat_loop, daemon=True, name="diloco-heartbeat")
        self._hb.start()

    @property
    def membership(self) -> Membership:
        return self.proto.membership

    def _alive(self, pid: bytes) -> bool:
        info = self.proto.membership.get(pid)
        if info is None or info.status == "left":
            return False
        return time.monotonic() - info.last_heartbeat < self.evict_after

    def _heartbeat_loop(self):
        while not self._stop.wait(self.heartbeat_interval):
            now = time.monotonic()
            frame = self.proto.frame(wire.Heartbeat(self.peer_id, now))
            for pid in self.membership.ids("live", "suspected", "joining"):
                if pid != self.peer_id:
                    self.endpoint.send(pid, frame)
            self.proto.update_membership(lambda m: heartbeat_tick(
                m, time.monotonic(), self.suspect_after, self.evict_after, self.peer_id))

    # -- membership ---------------------------------------------------------------

    def join(self, rendezvous: str | None, timeout: float = 10.0) -> Membership:
        """Register with a rendezvous peer (``None`` bootstraps a new run)."""
        if rendezvous is None:
            with self.proto.lock:
                self.proto._replicate_peers()
            return self.membership
        hello = wire.encode(wire.Hello(self.proto.run_id, self.peer_id, self.address, True))
        deadline = time.monotonic() + timeout
        while True:
            try:
                self.endpoint.send_to_address(rendezvous, hello)
                break
            except OSError as exc:
                if time.monotonic() > deadline:
                    raise JoinError(f"rendezvous {rendezvous} unreachable: {exc}") from None
                time.sleep(0.1)
        while True:
            item = self.endpoint.recv(deadline)
            if item is None:
                raise JoinError(f"no answer from rendezvous {rendezvous} (check run_id)")
            src, msg, _ = item
            if msg.mtype == wire.PEER_SET and msg.kind == wire.SNAPSHOT:
                break
            self.proto.future.append(item)
        if not msg.peers:
            raise ConfigError(f"rendezvous {rendezvous} rejected run_id {self.proto.run_id!r}")
        now = time.monotonic()
        with self.proto.lock:
            # peer-list updates may have overtaken the snapshot; only add to them
            m = self.proto._membership
            for r in msg.peers:
                if r.status != "left" and m.get(r.peer_id) is None:
                    m = m.add(PeerInfo(r.peer_id, r.address, now, r.status))
            self.proto._membership = replace(m, epoch=max(m.epoch, msg.membership_epoch))
            self.proto.next_epoch = msg.outer_epoch
            self.proto.started = msg.outer_epoch > 0
        return self.membership

    def wait_for_peers(self, n: int, timeout: float = 30.0) -> Membership:
        deadline = time.monotonic() + timeout
        while len(self.membership.ids("live")) < n:
            if time.monotonic() > deadline:
                raise JoinError(f"only {len(self.membership.ids('live'))} of {n} peers joined")
            time.sleep(0.05)
        return self.membership

    def leave(self) -> None:
        frame = self.proto.frame(wire.Leave(self.peer_id))
        for pid in self.membership.ids("live", "suspected", "joining"):
            self.endpoint.send(pid, frame)

    def close(self) -> None:
        self._stop.set()
        self.endpoint.close()

    # -- collectives ----------------------------------------------------------------

    def all_reduce_avg(self, local: PseudoGradient):
        """Average ``local`` with every contributor of its outer epoch."""
        result, report = run_blocking(self.endpoint, self.proto.all_reduce(
            local.outer_epoch, local.data, local.precision))
        self.reports.append(report)
        return PseudoGradient(result, local.layout, local.precision, local.outer_epoch), report

    def barrier(self, outer_epoch: int) -> tuple:
        return run_blocking(self.endpoint, self.proto.barrier(outer_epoch))

    # -- state hand-off for late joiners ----------------------------------------------

    def publish_state(self, outer_epoch: int, blob: bytes) -> None:
        self.proto.publish_local(state_key(self.proto.run_id),
                                 outer_epoch.to_bytes(8, "little") + blob)

    def fetch_state(self, min_epoch: int, timeout: float = 60.0) -> tuple[int, bytes]:
        """Poll live peers until one serves outer weights of ``min_epoch`` or later."""
        key = state_key(self.proto.run_id)
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            item = self.proto.store.get(key)
            if item is not None and len(item[1]) >= 8:
                epoch = int.from_bytes(item[1][:8], "little")
                if epoch >= min_epoch:
                    return epoch, item[1][8:]
            for pid in self.membership.ids("live"):
                if pid != self.peer_id:
                    self.endpoint.send(pid, self.proto.frame(wire.StoreGet(key)))
                    break
            time.sleep(0.1)
        raise JoinError(f"no peer served state for epoch >= {min_epoch}")

