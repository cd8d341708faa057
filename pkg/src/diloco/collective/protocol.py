"""Transport-independent peer protocol for one synchronous outer round.

A round for outer epoch ``e`` runs in three phases:

1. **barrier** - the lowest-id candidate acts as round leader. Followers check
   in; the leader waits until every candidate arrived or ``barrier_timeout``
   expires and broadcasts the contributor set (PEER_SET decision).
2. **ring** - pipelined reduce-scatter then all-gather over the contributors
   ordered by peer_id (see :mod:`.ring`).
3. **commit** - followers report READY with a digest; once the leader holds
   all of them it broadcasts COMMIT and everybody applies the result.

Any stall restarts the round under a higher attempt number with whoever
checks in again, so a crashed peer is excluded and the divisor is the
survivor count. A follower that loses its leader hands leadership to the next
candidate; a peer that already committed answers every later message about
that epoch with COMMIT, so survivors never diverge.

The protocol is written as generators yielding :class:`Send` and
:class:`Recv`; :mod:`.tcp` and :mod:`diloco.netsim` drive the same code over
real sockets and virtual links.
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass, field

import numpy as np

from ..errors import CollectiveError, ExcludedError, QuorumError
from . import wire
from .membership import Membership, PeerInfo, ReplicatedStore
from .ring import from_wire, owner_of, plan_chunks, quantize, to_wire


@dataclass(frozen=True)
class Send:
    dst: bytes
    data: bytes


@dataclass(frozen=True)
class Recv:
    deadline: float


@dataclass(frozen=True)
class ProtocolSettings:
    barrier_timeout: float = 30.0
    ring_timeout: float = 30.0
    leader_timeout: float | None = None
    max_restarts: int = 4
    chunk_size: int = 1 << 20
    quorum_min: int = 1

    @property
    def follower_timeout(self) -> float:
        if self.leader_timeout is not None:
            return self.leader_timeout
        return 2 * self.barrier_timeout + self.ring_timeout


@dataclass(frozen=True)
class CommitRecord:
    outer_epoch: int
    attempt: int
    contributors: tuple
    digest: bytes
    result: np.ndarray = field(repr=False)


@dataclass
class ReduceReport:
    outer_epoch: int
    precision: str
    attempt: int = 0
    restarts: int = 0
    contributors: tuple = ()
    bytes_sent: int = 0
    bytes_received: int = 0
    reduce_bytes_sent: int = 0
    reduce_bytes_received: int = 0
    control_bytes_sent: int = 0
    started: float = 0.0
    decided: float = 0.0
    finished: float = 0.0

    @property
    def wall_time(self) -> float:
        return self.finished - self.started

    @property
    def wait_time(self) -> float:
        return self.decided - self.started


def digest(arr: np.ndarray) -> bytes:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).digest()


def peers_key(run_id: str) -> str:
    return f"run/{run_id}/peers"


def state_key(run_id: str) -> str:
    return f"run/{run_id}/state"


class PeerProtocol:
    """Per-peer protocol state. ``background`` may be called from a receiver
    thread while a round generator runs on the engine thread."""

    def __init__(self, peer_id: bytes, run_id: str, membership: Membership,
                 settings: ProtocolSettings | None = None, clock=None, address: str = ""):
        self.peer_id = peer_id
        self.run_id = run_id
        self.address = address
        self.settings = settings or ProtocolSettings()
        self.clock = clock or (lambda: 0.0)
        self.lock = threading.RLock()
        self._membership = membership
        self.store = ReplicatedStore()
        self.committed: dict[int, CommitRecord] = {}
        self.next_epoch = 0
        self.started = False
        self.future: list = []
        self.bytes_sent: dict[int, int] = {}
        self.bytes_received: dict[int, int] = {}
        self.events: list[tuple[float, str]] = []
        self.alive_hint = lambda peer_id: False
        self.send_hook = None

    # -- shared state ---------------------------------------------------------

    @property
    def membership(self) -> Membership:
        with self.lock:
            return self._membership

    def update_membership(self, fn):
        with self.lock:
            self._membership = fn(self._membership)
            return self._membership

    def log(self, text: str) -> None:
        self.events.append((self.clock(), text))

    def frame(self, msg) -> bytes:
        data = wire.encode(msg)
        with self.lock:
            self.bytes_sent[msg.mtype] = self.bytes_sent.get(msg.mtype, 0) + len(data)
        return data

    def count_received(self, mtype: int, nbytes: int) -> None:
        with self.lock:
            self.bytes_received[mtype] = self.bytes_received.get(mtype, 0) + nbytes

    def counters(self) -> tuple[int, int, int, int]:
        with self.lock:
            sent = sum(self.bytes_sent.values())
            recv = sum(self.bytes_received.values())
            rs = self.bytes_sent.get(wire.REDUCE_CHUNK, 0)
            rr = self.bytes_received.get(wire.REDUCE_CHUNK, 0)
        return sent, recv, rs, rr

    def candidates(self) -> list[bytes]:
        return self.membership.ids("live", "suspected")

    def peer_records(self, ids=None) -> tuple:
        m = self.membership
        chosen = [p for p in m.peers if ids is None or p.peer_id in ids]
        return tuple(wire.PeerRecord(p.peer_id, p.status, p.address) for p in chosen)

    def publish_local(self, key: str, value: bytes) -> None:
        self.store.put_local(key, value)

    # -- background handling --------------------------------------------------

    def background(self, src: bytes, msg, nbytes: int = 0):
        """Handle messages that need no round context.

        Returns a list of ``(dst, frame)`` replies, or None when the message
        belongs to the inbox of the round generator.
        """
        now = self.clock()
        self.count_received(msg.mtype, nbytes)
        with self.lock:
            self._membership = self._membership.touch(src, now)
            t = msg.mtype
            if t == wire.HEARTBEAT:
                return []
            if t == wire.STORE_PUT:
                self.store.apply(msg.key, msg.version, msg.value)
                if msg.key == peers_key(self.run_id):
                    self._merge_peer_list(msg.value, now)
                return []
            if t == wire.STORE_GET:
                item = self.store.get(msg.key)
                if item is None:
                    return [(src, self.frame(wire.StorePut(msg.key, 0, b"")))]
                return [(src, self.frame(wire.StorePut(msg.key, item[0], item[1])))]
            if t == wire.LEAVE:
                if self._membership.get(msg.peer_id) is not None:
                    self._membership = self._membership.set_status(msg.peer_id, "left")
                return []
            if t == wire.HELLO:
                return self._on_hello(src, msg, now) if msg.join else []
            if t == wire.PEER_SET and msg.kind == wire.SNAPSHOT:
                return None
            epoch = msg.outer_epoch
            if epoch < self.next_epoch:
                rec = self.committed.get(epoch)
                if rec is not None and t in (wire.BARRIER, wire.REDUCE_RESULT, wire.PEER_SET):
                    if not (t == wire.REDUCE_RESULT and msg.kind == wire.COMMIT):
                        return [(src, self.frame(wire.ReduceResult(
                            wire.COMMIT, epoch, rec.attempt, rec.digest)))]
                return []
            return None

    def _on_hello(self, src, msg, now):
        if msg.run_id != self.run_id:
            self.log(f"rejected join from {src.hex()[:8]}: run_id {msg.run_id!r}")
            return [(src, self.frame(wire.PeerSet(wire.SNAPSHOT, self.next_epoch, 0, 0, ())))]
        status = "joining" if self.started else "live"
        existing = self._membership.get(msg.peer_id)
        if existing is None or existing.status == "left":
            self._membership = self._membership.add(
                PeerInfo(msg.peer_id, msg.address, now, status))
            self.log(f"peer {msg.peer_id.hex()[:8]} joined as {status}")
        replies = self._replicate_peers()
        snap = wire.PeerSet(wire.SNAPSHOT, self.next_epoch, 0, self._membership.epoch,
                            self.peer_records())
        replies.append((src, self.frame(snap)))
        for key, (version, value) in self.store.items():
            if key != state_key(self.run_id):
                replies.append((src, self.frame(wire.StorePut(key, version, value))))
        return replies

    def _replicate_peers(self):
        value = wire.pack_peers(self.peer_records())
        version = self.store.put_local(peers_key(self.run_id), value)
        put = wire.StorePut(peers_key(self.run_id), version, value)
        return [(pid, self.frame(put)) for pid in self._membership.ids("live", "suspected", "joining")
                if pid != self.peer_id]

    def _merge_peer_list(self, value: bytes, now: float) -> None:
        records, _ = wire.unpack_peers(value)
        m = self._membership
        for rec in records:
            cur = m.get(rec.peer_id)
            if cur is None:
                m = m.add(PeerInfo(rec.peer_id, rec.address, now, rec.status))
            elif cur.status != rec.status and rec.status in ("joining", "live") and cur.status == "joining":
                m = m.set_status(rec.peer_id, rec.status)
        self._membership = m

    # -- round bookkeeping ----------------------------------------------------

    def commit(self, rec: CommitRecord, candidates) -> None:
        with self.lock:
            self.committed[rec.outer_epoch] = rec
            for old in [e for e in self.committed if e < rec.outer_epoch - 16]:
                del self.committed[old]
            self.next_epoch = rec.outer_epoch + 1
            m = self._membership
            for pid in candidates:
                cur = m.get(pid)
                if pid not in rec.contributors and cur is not None and cur.status != "left":
                    m = m.set_status(pid, "left")
                    self.log(f"excluded {pid.hex()[:8]} from epoch {rec.outer_epoch}")
            for p in m.peers:
                if p.status == "joining":
                    m = m.set_status(p.peer_id, "live")
            self._membership = m

    def take_future(self, epoch: int) -> list:
        with self.lock:
            mine = [item for item in self.future if item[1].outer_epoch == epoch]
            self.future = [item for item in self.future if item[1].outer_epoch > epoch]
            return mine

    # -- public generators ----------------------------------------------------

    def all_reduce(self, epoch: int, delta: np.ndarray, precision: str = "fp32"):
        """Generator: average ``delta`` over the contributors of ``epoch``.

        Returns ``(result_float64, report)``.
        """
        rnd = _Round(self, epoch, np.asarray(delta, dtype=np.float64), precision, barrier_only=False)
        return (yield from rnd.run())

    def barrier(self, epoch: int):
        """Generator: agree on the contributor set for ``epoch``; returns it."""
        rnd = _Round(self, epoch, None, "fp32", barrier_only=True)
        _, report = yield from rnd.run()
        return report.contributors


def _prio(attempt: int, leader: bytes | None):
    if leader is None:
        return (-1, b"")
    return (attempt, bytes(255 - b for b in leader))


FOLLOW_WAIT, LEAD_BARRIER, RING, FOLLOW_READY, LEAD_READY = range(5)


class _Round:
    def __init__(self, proto: PeerProtocol, epoch: int, delta, precision: str, barrier_only: bool):
        self.p = proto
        self.me = proto.peer_id
        self.e = epoch
        self.delta = delta
        self.precision = precision
        self.barrier_only = barrier_only
        self.cfg = proto.settings
        self.results: dict[int, tuple[np.ndarray, tuple]] = {}
        self.suspects: set[bytes] = set()
        self.role = None
        self.leader = None
        self.attempt = 0
        self.state = None
        self.contributors: tuple = ()
        self.checkins: set[bytes] = set()
        self.readies: dict[int, set] = {}
        self.stash: dict[int, list] = {}
        self.restarts = 0
        self.checked_in = None
        self.deadline = 0.0
        self.out: list[tuple[bytes, bytes]] = []
        self.ring: _Ring | None = None
        self.done = None
        self.report = ReduceReport(epoch, precision)

    def now(self) -> float:
        return self.p.clock()

    def send(self, dst: bytes, msg) -> None:
        self.out.append((dst, self.p.frame(msg)))

    def check_in(self, leader: bytes, attempt: int) -> None:
        self.checked_in = (leader, attempt)
        self.send(leader, wire.Barrier(wire.CHECKIN, self.e, attempt))

    def candidates(self) -> list[bytes]:
        ids = [pid for pid in self.p.candidates() if pid not in self.suspects]
        if self.me not in ids:
            ids.append(self.me)
        return sorted(ids)

    # -- main loop ------------------------------------------------------------

    def run(self):
        with self.p.lock:
            self.p.started = True
            if self.e < self.p.next_epoch:
                raise CollectiveError(f"epoch {self.e} already committed")
        c0 = self.p.counters()
        self.report.started = self.now()
        pending = self.p.take_future(self.e)
        self._start()
        for src, msg, nbytes in pending:
            if self.done is None:
                self._on_message(src, msg)
        while self.done is None:
            while self.out:
                dst, data = self.out.pop(0)
                yield Send(dst, data)
            if self.done is not None:
                break
            item = yield Recv(self.deadline)
            if item is None:
                if self.now() >= self.deadline:
                    self._on_timeout()
            else:
                src, msg, nbytes = item
                self._on_message(src, msg)
        while self.out:
            dst, data = self.out.pop(0)
            yield Send(dst, data)
        c1 = self.p.counters()
        r = self.report
        r.bytes_sent, r.bytes_received = c1[0] - c0[0], c1[1] - c0[1]
        r.reduce_bytes_sent, r.reduce_bytes_received = c1[2] - c0[2], c1[3] - c0[3]
        r.control_bytes_sent = r.bytes_sent - r.reduce_bytes_sent
        r.finished = self.now()
        return self.done, r

    def _start(self):
        cands = self.candidates()
        if len(cands) < self.cfg.quorum_min:
            raise QuorumError(f"{len(cands)} candidates below quorum {self.cfg.quorum_min}")
        if cands[0] == self.me:
            self._begin_attempt(0)
        else:
            self._follow(cands[0], 0)
            self.check_in(self.leader, 0)

    def _follow(self, leader: bytes, attempt: int):
        self.role = "follower"
        self.leader = leader
        self.attempt = attempt
        self.state = FOLLOW_WAIT
        self.ring = None
        self.deadline = self.now() + self.cfg.follower_timeout

    def _begin_attempt(self, attempt: int):
        self.role = "leader"
        self.leader = self.me
        self.attempt = attempt
        self.state = LEAD_BARRIER
        self.ring = None
        self.checkins = {self.me}
        for q in self.candidates():
            if q != self.me:
                self.send(q, wire.Barrier(wire.REQUEST, self.e, attempt))
        self.deadline = self.now() + self.cfg.barrier_timeout
        self._maybe_decide()

    def _restart(self):
        self.restarts += 1
        self.report.restarts = self.restarts
        self.p.log(f"epoch {self.e}: restarting after attempt {self.attempt}")
        if self.restarts > self.cfg.max_restarts:
            raise CollectiveError(f"epoch {self.e}: gave up after {self.restarts - 1} restarts")
        self._begin_attempt(self.attempt + 1)

    def _maybe_decide(self):
        if self.state == LEAD_BARRIER and set(self.candidates()) <= self.checkins:
            self._decide()

    def _decide(self):
        contributors = tuple(sorted(self.checkins))
        if len(contributors) < self.cfg.quorum_min:
            raise QuorumError(f"epoch {self.e}: {len(contributors)} contributors below quorum "
                              f"{self.cfg.quorum_min}")
        decision = wire.PeerSet(wire.DECISION, self.e, self.attempt, self.p.membership.epoch,
                                tuple(wire.PeerRecord(pid, "live", "") for pid in contributors))
        for q in contributors:
            if q != self.me:
                self.send(q, decision)
        self._enter(contributors)

    def _enter(self, contributors: tuple):
        self.contributors = contributors
        self.report.decided = self.now()
        self.report.contributors = contributors
        if self.barrier_only:
            self._finish(self.attempt, np.zeros(0), contributors)
            return
        if len(contributors) == 1:
            self.results[self.attempt] = (self.delta.copy(), contributors)
            self._finish(self.attempt, self.delta.copy(), contributors)
            return
        self.state = RING
        self.ring = _Ring(self.me, contributors, self.delta, self.precision,
                          self.cfg.chunk_size, self.attempt, self.e)
        for dst, msg in self.ring.start():
            self.send(dst, msg)
        self.deadline = self.now() + self.cfg.ring_timeout
        for src, msg in self.stash.pop(self.attempt, []):
            if self.state == RING:
                self._on_chunk(src, msg)
        self.stash = {a: v for a, v in self.stash.items() if a > self.attempt}

    def _ring_done(self):
        result = self.ring.final
        self.results[self.attempt] = (result, self.contributors)
        self.ring = None
        if self.role == "leader":
            self.state = LEAD_READY
            self.deadline = self.now() + self.cfg.ring_timeout
            self._maybe_commit()
        else:
            self.state = FOLLOW_READY
            self.send(self.leader, wire.ReduceResult(wire.READY, self.e, self.attempt, digest(result)))
            self.deadline = self.now() + self.cfg.follower_timeout

    def _maybe_commit(self):
        need = set(self.contributors) - {self.me}
        if self.state == LEAD_READY and need <= self.readies.get(self.attempt, set()):
            result, contributors = self.results[self.attempt]
            commit = wire.ReduceResult(wire.COMMIT, self.e, self.attempt, digest(result))
            for q in contributors:
                if q != self.me:
                    self.send(q, commit)
            self._finish(self.attempt, result, contributors)

    def _finish(self, attempt: int, result: np.ndarray, contributors: tuple):
        cands = self.candidates() + sorted(self.suspects)
        self.p.commit(CommitRecord(self.e, attempt, contributors, digest(result), result), cands)
        self.report.attempt = attempt
        self.report.contributors = contributors
        if not self.report.decided:
            self.report.decided = self.now()
        self.done = np.asarray(result, dtype=np.float64)

    # -- events ---------------------------------------------------------------

    def _on_timeout(self):
        if self.state in (FOLLOW_WAIT, FOLLOW_READY):
            if self.p.alive_hint(self.leader):
                self.deadline = self.now() + self.cfg.follower_timeout
                return
            self.p.log(f"epoch {self.e}: leader {self.leader.hex()[:8]} timed out")
            self.suspects.add(self.leader)
            nxt = self.candidates()[0]
            if nxt == self.me:
                self.restarts += 1
                self.report.restarts = self.restarts
                if self.restarts > self.cfg.max_restarts:
                    raise CollectiveError(f"epoch {self.e}: gave up after leader failures")
                self._begin_attempt(self.attempt + 1)
            else:
                self._follow(nxt, self.attempt)
                self.check_in(nxt, self.attempt)
        elif self.state == LEAD_BARRIER:
            missing = set(self.candidates()) - self.checkins
            if any(self.p.alive_hint(q) for q in missing):
                # stragglers that still heartbeat are waited for
                self.deadline = self.now() + self.cfg.barrier_timeout
                return
            self._decide()
        elif self.state == RING:
            if self.role == "leader":
                self._restart()
            else:
                self.check_in(self.leader, self.attempt)
                self._follow(self.leader, self.attempt)
        elif self.state == LEAD_READY:
            self._restart()

    def _on_message(self, src: bytes, msg):
        if msg.outer_epoch > self.e:
            with self.p.lock:
                self.p.future.append((src, msg, 0))
            return
        if msg.outer_epoch < self.e:
            return
        t = msg.mtype
        if t == wire.BARRIER:
            if msg.kind == wire.REQUEST:
                self._on_request(src, msg.attempt)
            else:
                self._on_checkin(src, msg.attempt)
        elif t == wire.PEER_SET and msg.kind == wire.DECISION:
            self._on_decision(src, msg)
        elif t == wire.REDUCE_CHUNK:
            if self.state == RING and msg.attempt == self.attempt:
                self._on_chunk(src, msg)
            elif msg.attempt >= self.attempt:
                self.stash.setdefault(msg.attempt, []).append((src, msg))
        elif t == wire.REDUCE_RESULT:
            if msg.kind == wire.READY:
                self.readies.setdefault(msg.attempt, set()).add(src)
                if self.role == "leader" and msg.attempt == self.attempt:
                    self._maybe_commit()
            else:
                self._on_commit(src, msg)

    def _on_request(self, src: bytes, attempt: int):
        if _prio(attempt, src) < _prio(self.attempt, self.leader):
            return
        if (src, attempt) == self.checked_in or (
                src == self.leader and attempt == self.attempt and self.state != FOLLOW_WAIT):
            return
        self.suspects.discard(src)
        self._follow(src, attempt)
        self.check_in(src, attempt)

    def _on_checkin(self, src: bytes, attempt: int):
        if self.role == "leader":
            if attempt == self.attempt and self.state == LEAD_BARRIER:
                self.suspects.discard(src)
                self.checkins.add(src)
                self._maybe_decide()
            elif attempt == self.attempt and self.state in (RING, LEAD_READY):
                if src in self.contributors:
                    self._restart()
                else:
                    # late arrival: tell it who was chosen so it can step out
                    self.send(src, wire.PeerSet(
                        wire.DECISION, self.e, self.attempt, self.p.membership.epoch,
                        tuple(wire.PeerRecord(pid, "live", "") for pid in self.contributors)))
            elif attempt > self.attempt:
                self._begin_attempt(attempt)
                self.checkins.add(src)
                self._maybe_decide()
        else:
            # a peer picked us as the next leader
            self.p.log(f"epoch {self.e}: taking over leadership")
            self._begin_attempt(max(self.attempt, attempt) + 1)

    def _on_decision(self, src: bytes, msg):
        if _prio(msg.attempt, src) < _prio(self.attempt, self.leader):
            return
        if (src, msg.attempt) == (self.leader, self.attempt) and self.state != FOLLOW_WAIT:
            return
        contributors = tuple(sorted(r.peer_id for r in msg.peers))
        if self.me not in contributors:
            raise ExcludedError(f"epoch {self.e}: not among the {len(contributors)} contributors")
        self.role = "follower"
        self.leader = src
        self.attempt = msg.attempt
        self._enter(contributors)

    def _on_chunk(self, src: bytes, msg):
        self.deadline = self.now() + self.cfg.ring_timeout
        for dst, out in self.ring.on_chunk(src, msg):
            self.send(dst, out)
        if self.ring.complete:
            self._ring_done()

    def _on_commit(self, src: bytes, msg):
        held = self.results.get(msg.attempt)
        if held is None:
            raise ExcludedError(f"epoch {self.e}: committed attempt {msg.attempt} without us")
        result, contributors = held
        if digest(result) != msg.digest:
            raise CollectiveError(f"epoch {self.e}: digest mismatch on commit")
        if self.role == "leader":
            commit = wire.ReduceResult(wire.COMMIT, self.e, msg.attempt, msg.digest)
            for q in contributors:
                if q not in (self.me, src):
                    self.send(q, commit)
        self._finish(msg.attempt, result, contributors)


class _Ring:
    """Pipelined ring state for one attempt."""

    def __init__(self, me, contributors, delta, precision, chunk_size, attempt, epoch):
        self.k = len(contributors)
        self.rank = contributors.index(me)
        self.next = contributors[(self.rank + 1) % self.k]
        self.prev = contributors[(self.rank - 1) % self.k]
        self.precision = precision
        self.attempt = attempt
        self.epoch = epoch
        self.acc = quantize(delta, precision)
        self.final = np.empty(delta.size, dtype=np.float32)
        self.plan = plan_chunks(delta.size, self.k, chunk_size, precision)
        self.chunks = {ch.index: ch for subs in self.plan for ch in subs}
        self.remaining = len(self.chunks)
        self.seen: set = set()

    @property
    def complete(self) -> bool:
        return self.remaining == 0

    def _msg(self, phase, ch, values):
        return wire.ReduceChunk(self.epoch, ch.index, self.precision, phase, self.attempt,
                                ch.start, to_wire(values, self.precision))

    def start(self):
        return [(self.next, self._msg("rs", ch, self.acc[ch.start:ch.end]))
                for ch in self.plan[self.rank]]

    def on_chunk(self, src, msg):
        ch = self.chunks.get(msg.chunk_index)
        key = (msg.phase, msg.chunk_index)
        if (src != self.prev or ch is None or key in self.seen or msg.offset != ch.start
                or msg.data.size != ch.size or msg.precision != self.precision):
            return []
        self.seen.add(key)
        vals = from_wire(msg.data, self.precision)
        sl = slice(ch.start, ch.end)
        if msg.phase == "rs":
            hop = (self.rank - ch.segment) % self.k
            self.acc[sl] = vals + self.acc[sl]
            if hop < self.k - 1:
                return [(self.next, self._msg("rs", ch, self.acc[sl]))]
            mean = quantize(self.acc[sl] / np.float32(self.k), self.precision)
            self.final[sl] = mean
            self.remaining -= 1
            return [(self.next, self._msg("ag", ch, mean))]
        self.final[sl] = vals
        self.remaining -= 1
        hop = (self.rank - owner_of(ch.segment, self.k)) % self.k
        if hop < self.k - 1:
            return [(self.next, self._msg("ag", ch, vals))]
        return []
