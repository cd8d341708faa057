"""Deterministic virtual-time network simulator and utilization accounting.

Peers are generators yielding :class:`~diloco.collective.protocol.Send`,
:class:`~diloco.collective.protocol.Recv` and :class:`Sleep`. The event loop
moves real encoded frames over directed links with their own bandwidth and
latency; each link serializes its frames (``busy_until``) and there is no
contention between different links. Time is an integer count of
nanoseconds, so ledger buckets add up exactly.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable

import numpy as np

from . import engine, tasks
from .collective import wire
from .collective.membership import Membership, PeerInfo
from .collective.protocol import PeerProtocol, ProtocolSettings, Recv, Send
from .errors import CollectiveError, ConfigError, DilocoError
from .tensor import PseudoGradient, Segment

SEC = 1_000_000_000


def to_ns(seconds: float) -> int:
    return int(round(seconds * SEC))


# -- links ---------------------------------------------------------------------

@dataclass(frozen=True)
class LinkMatrix:
    names: tuple
    bandwidth_mbits: np.ndarray = field(compare=False)
    latency_ms: np.ndarray = field(compare=False)
    interpolated: frozenset = frozenset()
    asymmetric: bool = False

    def __post_init__(self):
        k = len(self.names)
        bw = np.array(self.bandwidth_mbits, dtype=np.float64)
        lat = np.array(self.latency_ms, dtype=np.float64)
        if bw.shape != (k, k) or lat.shape != (k, k):
            raise ConfigError(f"link matrix must be {k}x{k}")
        off = ~np.eye(k, dtype=bool)
        if (bw[off] < 0).any() or (lat < 0).any() or np.isnan(bw).any() or not np.isfinite(lat).all():
            raise ConfigError("bandwidth and latency entries must be finite and non-negative")
        if not self.asymmetric and not (np.array_equal(bw, bw.T) and np.array_equal(lat, lat.T)):
            raise ConfigError("link matrix is not symmetric; declare it asymmetric")
        bw.flags.writeable = False
        lat.flags.writeable = False
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "bandwidth_mbits", bw)
        object.__setattr__(self, "latency_ms", lat)

    @property
    def size(self) -> int:
        return len(self.names)

    @classmethod
    def uniform(cls, k: int, mbits: float, latency_ms: float = 0.0) -> "LinkMatrix":
        bw = np.full((k, k), float(mbits))
        lat = np.full((k, k), float(latency_ms))
        np.fill_diagonal(lat, 0.0)
        return cls(tuple(f"w{i}" for i in range(k)), bw, lat)

    def scaled(self, factor: float) -> "LinkMatrix":
        return LinkMatrix(self.names, self.bandwidth_mbits * factor, self.latency_ms,
                          self.interpolated, self.asymmetric)

    def with_bandwidth(self, i: int, j: int, mbits: float) -> "LinkMatrix":
        bw = self.bandwidth_mbits.copy()
        bw[i, j] = mbits
        if not self.asymmetric:
            bw[j, i] = mbits
        return LinkMatrix(self.names, bw, self.latency_ms, self.interpolated, self.asymmetric)

    def slowest(self) -> float:
        off = ~np.eye(self.size, dtype=bool)
        return float(self.bandwidth_mbits[off].min())

    @classmethod
    def parse(cls, text: str) -> "LinkMatrix":
        """Plain-text table::

            workers a b c        # names, in ring order
            latency_ms 20        # optional default latency
            asymmetric           # optional: pairs below are directed
            a b 127 *            # bandwidth in Mbit/s; '*' marks an interpolated entry
            a c 300 40           # optional per-pair latency in ms
        """
        names = None
        default_lat = 0.0
        asym = False
        pairs = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].split()
            if not line:
                continue
            head = line[0]
            if head == "workers":
                names = tuple(line[1:])
            elif head == "latency_ms":
                default_lat = float(line[1])
            elif head == "asymmetric":
                asym = True
            else:
                if names is None:
                    raise ConfigError(f"line {lineno}: 'workers' must come first")
                if len(line) < 3:
                    raise ConfigError(f"line {lineno}: expected '<a> <b> <mbits>'")
                star = "*" in line[3:]
                rest = [x for x in line[3:] if x != "*"]
                lat = float(rest[0]) if rest else None
                pairs.append((lineno, line[0], line[1], float(line[2]), lat, star))
        if not names:
            raise ConfigError("link table names no workers")
        index = {n: i for i, n in enumerate(names)}
        k = len(names)
        bw = np.full((k, k), np.nan)
        np.fill_diagonal(bw, 0.0)
        lat = np.full((k, k), default_lat)
        np.fill_diagonal(lat, 0.0)
        interp = set()
        for lineno, a, b, mbits, plat, star in pairs:
            if a not in index or b not in index:
                raise ConfigError(f"line {lineno}: unknown worker in pair {a}-{b}")
            i, j = index[a], index[b]
            targets = [(i, j)] if asym else [(i, j), (j, i)]
            for x, y in targets:
                bw[x, y] = mbits
                if plat is not None:
                    lat[x, y] = plat
            if star:
                interp.add((a, b))
        if np.isnan(bw).any():
            i, j = np.argwhere(np.isnan(bw))[0]
            raise ConfigError(f"no bandwidth given for {names[i]}-{names[j]}")
        return cls(names, bw, lat, frozenset(interp), asym)

    @classmethod
    def load(cls, path) -> "LinkMatrix":
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh.read())

    @classmethod
    def sample(cls) -> "LinkMatrix":
        """The shipped four-region matrix (Mbit/s between the workers)."""
        text = resources.files("diloco").joinpath("data/sample_bandwidth.txt").read_text("utf-8")
        return cls.parse(text)


def transfer_time(nbytes: int, bandwidth_mbits: float, latency_ms: float = 0.0) -> float:
    """Seconds to push ``nbytes`` over one link."""
    if not bandwidth_mbits > 0:
        raise ConfigError(f"bandwidth must be positive, got {bandwidth_mbits} Mbit/s")
    return latency_ms / 1e3 + nbytes * 8 / (bandwidth_mbits * 1e6)


def ring_time_bound(payload_bytes: int, links: LinkMatrix, order=None) -> float:
    """Analytic ring all-reduce time: 2(K-1) hops of one segment each over the
    slowest ring edge, plus per-hop latency."""
    k = links.size
    order = list(range(k)) if order is None else list(order)
    if k == 1:
        return 0.0
    edges = [(order[r], order[(r + 1) % k]) for r in range(k)]
    bw = min(links.bandwidth_mbits[i, j] for i, j in edges)
    lat = max(links.latency_ms[i, j] for i, j in edges)
    seg = payload_bytes / k
    return 2 * (k - 1) * transfer_time(seg, bw, lat)


# -- clock and ledger ----------------------------------------------------------

class VirtualClock:
    """Event queue ordered by ``(time_ns, order, sequence)``; time never
    decreases. ``order`` breaks ties independently of insertion order, which
    keeps a resumed run's schedule identical to the uninterrupted one."""

    def __init__(self):
        self.now_ns = 0
        self._queue: list = []
        self._seq = 0

    def now(self) -> float:
        return self.now_ns / SEC

    def schedule(self, at_ns: int, event, order: tuple = ()) -> None:
        if at_ns < self.now_ns:
            raise ValueError("cannot schedule in the past")
        heapq.heappush(self._queue, (at_ns, order, self._seq, event))
        self._seq += 1

    def pop(self):
        at_ns, _, _, event = heapq.heappop(self._queue)
        self.now_ns = at_ns
        return event

    def __len__(self):
        return len(self._queue)


@dataclass
class WorkerTime:
    compute_ns: int = 0
    comm_ns: int = 0
    idle_ns: int = 0

    @property
    def total_ns(self) -> int:
        return self.compute_ns + self.comm_ns + self.idle_ns


@dataclass
class UtilizationLedger:
    workers: dict = field(default_factory=dict)

    @classmethod
    def single(cls, compute_s: float, comm_s: float, idle_s: float = 0.0) -> "UtilizationLedger":
        return cls({"w0": WorkerTime(to_ns(compute_s), to_ns(comm_s), to_ns(idle_s))})

    def add(self, worker, bucket: str, ns: int) -> None:
        if ns < 0:
            raise ValueError(f"negative {bucket} time")
        wt = self.workers.setdefault(worker, WorkerTime())
        setattr(wt, f"{bucket}_ns", getattr(wt, f"{bucket}_ns") + ns)

    def seconds(self, worker=None) -> dict:
        items = [self.workers[worker]] if worker is not None else list(self.workers.values())
        return {b: sum(getattr(w, f"{b}_ns") for w in items) / SEC for b in ("compute", "comm", "idle")}


def utilization(ledger: UtilizationLedger, worker=None) -> float:
    """compute / (compute + comm + idle), pooled over workers unless one is named."""
    s = ledger.seconds(worker)
    total = s["compute"] + s["comm"] + s["idle"]
    if total <= 0:
        raise ValueError("utilization needs positive total time")
    return s["compute"] / total


# -- event loop ----------------------------------------------------------------

@dataclass(frozen=True)
class Sleep:
    seconds: float


@dataclass
class _Proc:
    pid: bytes
    gen: object
    inbox: deque = field(default_factory=deque)
    waiting: bool = False
    token: int = 0
    done: bool = False
    result: object = None
    error: BaseException | None = None


class SimNetwork:
    """Runs peer generators over virtual links.

    ``detect_after`` is how long a crashed peer still looks alive to the
    others (the heartbeat eviction delay); a peer that is merely slow always
    looks alive.
    """

    def __init__(self, links: LinkMatrix, sites: dict, detect_after: float = 0.0):
        self.links = links
        self.sites = dict(sites)
        self.clock = VirtualClock()
        self.detect_after_ns = to_ns(detect_after)
        self.protocols: dict[bytes, PeerProtocol] = {}
        self.procs: dict[bytes, _Proc] = {}
        self.dead: dict[bytes, int] = {}
        self.busy: dict[tuple, int] = {}
        self.link_bytes: dict[tuple, int] = {}
        self.fault_hook: Callable | None = None
        self.log: list[tuple[int, str]] = []

    def now(self) -> float:
        return self.clock.now()

    def add_peer(self, proto: PeerProtocol) -> None:
        if proto.peer_id not in self.sites:
            raise ConfigError(f"peer {proto.peer_id.hex()[:8]} has no site")
        proto.clock = self.now
        proto.alive_hint = self.alive_hint
        self.protocols[proto.peer_id] = proto

    def alive_hint(self, pid: bytes) -> bool:
        died = self.dead.get(pid)
        return died is None or self.clock.now_ns - died < self.detect_after_ns

    def spawn(self, pid: bytes, gen, at: float = 0.0) -> None:
        self.procs[pid] = _Proc(pid, gen)
        self.clock.schedule(max(to_ns(at), self.clock.now_ns), ("resume", pid, 0, None), (pid, b""))

    def kill_at(self, pid: bytes, at: float) -> None:
        self.clock.schedule(max(to_ns(at), self.clock.now_ns), ("kill", pid), (b"", pid))

    def kill(self, pid: bytes) -> None:
        if pid in self.dead:
            return
        self.dead[pid] = self.clock.now_ns
        self.log.append((self.clock.now_ns, f"killed {pid.hex()[:8]}"))
        p = self.procs.get(pid)
        if p is not None and not p.done:
            p.done = True
            p.error = CollectiveError("killed")
            p.gen.close()

    def _transmit(self, src: bytes, dst: bytes, frame: bytes) -> None:
        i, j = self.sites[src], self.sites[dst]
        if i == j:
            arrive = self.clock.now_ns
        else:
            bw = self.links.bandwidth_mbits[i, j]
            if not bw > 0:
                raise ConfigError(f"no link between {self.links.names[i]} and {self.links.names[j]}")
            start = max(self.clock.now_ns, self.busy.get((src, dst), 0))
            tx = 0 if math.isinf(bw) else math.ceil(len(frame) * 8000 / bw)
            self.busy[(src, dst)] = start + tx
            arrive = start + tx + to_ns(self.links.latency_ms[i, j] / 1e3)
        self.link_bytes[(src, dst)] = self.link_bytes.get((src, dst), 0) + len(frame)
        self.clock.schedule(arrive, ("deliver", src, dst, frame), (dst, src))

    def _advance(self, p: _Proc, value) -> None:
        while not p.done:
            try:
                op = p.gen.send(value)
            except StopIteration as stop:
                p.done, p.result = True, stop.value
                return
            except DilocoError as exc:
                p.done, p.error = True, exc
                self.log.append((self.clock.now_ns, f"{p.pid.hex()[:8]}: {exc}"))
                return
            value = None
            if isinstance(op, Send):
                when = self.fault_hook(p.pid, op) if self.fault_hook else None
                if when == "before":
                    self.kill(p.pid)
                    return
                self._transmit(p.pid, op.dst, op.data)
                if when == "after":
                    self.kill(p.pid)
                    return
            elif isinstance(op, Recv):
                if p.inbox:
                    value = p.inbox.popleft()
                elif op.deadline <= self.now():
                    value = None
                else:
                    at = max(math.ceil(op.deadline * SEC), self.clock.now_ns + 1)
                    p.waiting = True
                    p.token += 1
                    self.clock.schedule(at, ("resume", p.pid, p.token, None), (p.pid, b""))
                    return
            elif isinstance(op, Sleep):
                p.token += 1
                self.clock.schedule(self.clock.now_ns + to_ns(op.seconds),
                                    ("resume", p.pid, p.token, None), (p.pid, b""))
                return
            else:
                raise TypeError(f"unknown operation {op!r}")

    def _deliver(self, src: bytes, dst: bytes, frame: bytes) -> None:
        if dst in self.dead or dst not in self.protocols:
            return
        msg = wire.decode(frame)
        proto = self.protocols[dst]
        replies = proto.background(src, msg, len(frame))
        if replies is not None:
            for to, data in replies:
                if to not in self.dead:
                    self._transmit(dst, to, data)
            return
        p = self.procs.get(dst)
        if p is None or p.done:
            return
        p.inbox.append((src, msg, len(frame)))
        if p.waiting:
            p.waiting = False
            p.token += 1
            self._advance(p, p.inbox.popleft())

    def run(self, until: float | None = None) -> None:
        limit = None if until is None else to_ns(until)
        while len(self.clock):
            if limit is not None and self.clock._queue[0][0] > limit:
                break
            event = self.clock.pop()
            kind = event[0]
            if kind == "deliver":
                self._deliver(*event[1:])
            elif kind == "kill":
                self.kill(event[1])
            else:
                _, pid, token, value = event
                p = self.procs.get(pid)
                if p is None or p.done or token != p.token:
                    continue
                p.waiting = False
                self._advance(p, value)


# -- simulated runs ------------------------------------------------------------

def make_peer_ids(k: int, seed: int = 0) -> list[bytes]:
    """Deterministic 128-bit ids, returned in sorted (ring) order."""
    rng = tasks.keyed_rng(seed, "init", 10_000 + k)
    return sorted(rng.bytes(16) for _ in range(k))


@dataclass(frozen=True)
class StepTimeModel:
    """Seconds per inner step: ``base * multiplier[w] * (1 + jitter * N(0,1))``."""
    base_seconds: float = 1.0
    multipliers: tuple = ()
    jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.base_seconds < 0 or self.jitter < 0 or any(m <= 0 for m in self.multipliers):
            raise ConfigError("step times must be non-negative and multipliers positive")

    def multiplier(self, worker: int) -> float:
        return self.multipliers[worker] if worker < len(self.multipliers) else 1.0

    def step(self, worker: int, step: int) -> float:
        t = self.base_seconds * self.multiplier(worker)
        if self.jitter:
            z = tasks.keyed_rng(self.seed, "noise", worker * 1_000_003 + step).standard_normal()
            t *= max(0.0, 1.0 + self.jitter * z)
        return t


@dataclass
class FaultPlan:
    """Kill ``worker`` at ``at`` seconds, when it sends its n-th frame of a
    type (``on_type`` / ``count``), or not at all."""
    worker: int
    at: float | None = None
    on_type: int | None = None
    count: int = 1
    when: str = "after"
    outer_epoch: int | None = None


@dataclass
class SimResult:
    states: dict
    errors: dict
    ledger: UtilizationLedger
    records: list
    reports: dict
    wall_seconds: float
    peer_ids: list
    network: SimNetwork = field(repr=False)
    contributions: dict = field(default_factory=dict, repr=False)
    results: dict = field(default_factory=dict, repr=False)
    finish_ns: dict = field(default_factory=dict)


def run_simulated(config: engine.DilocoConfig, task: tasks.TaskSpec | None, links: LinkMatrix,
                  step_time: StepTimeModel, *, settings: ProtocolSettings | None = None,
                  payload_elements: int | None = None, faults=(), seed: int = 0,
                  emit: Callable[[dict], None] | None = None, detect_after: float = 0.0,
                  evaluate: bool = True, initial_states: dict | None = None,
                  start_times: dict | None = None, on_round_end: Callable | None = None,
                  ledger: UtilizationLedger | None = None,
                  keep_contributions: bool = False) -> SimResult:
    """Execute a full DiLoCo run with ``config.num_workers`` peers in virtual time.

    With ``task=None`` the run is communication-only: each window sleeps for
    its compute time and all-reduces ``payload_elements`` zeros, which is
    what the utilization experiments need. ``initial_states`` and
    ``start_times`` (keyed by worker index) resume from an outer-round
    boundary; ``on_round_end(worker, state, now_ns)`` is called after every
    outer step.
    """
    k = config.num_workers
    if links.size < k:
        raise ConfigError(f"link matrix has {links.size} workers, run needs {k}")
    settings = settings or ProtocolSettings()
    ids = make_peer_ids(k, seed)
    sites = {pid: i for i, pid in enumerate(ids)}
    net = SimNetwork(links, sites, detect_after)
    members = Membership.create([PeerInfo(pid, f"sim:{i}") for i, pid in enumerate(ids)],
                                quorum_min=settings.quorum_min)
    ledger = ledger if ledger is not None else UtilizationLedger()
    records: list = []
    reports: dict = {i: [] for i in range(k)}
    contributions: dict = {i: {} for i in range(k)}
    results: dict = {i: {} for i in range(k)}
    states: dict = {}
    finish_ns: dict = {}

    def sink(rec):
        records.append(rec)
        if emit is not None:
            emit(rec)

    for i, pid in enumerate(ids):
        proto = PeerProtocol(pid, "sim", members, settings, address=f"sim:{i}")
        net.add_peer(proto)
        proto.started = True
        if initial_states:
            proto.next_epoch = initial_states[i].outer_epoch

    def reduce(i, proto, pg):
        result, report = yield from proto.all_reduce(pg.outer_epoch, pg.data, pg.precision)
        _account(ledger, links.names[i], report)
        reports[i].append(report)
        if keep_contributions:
            contributions[i][pg.outer_epoch] = pg.data
            results[i][pg.outer_epoch] = result
        return PseudoGradient(result, pg.layout, pg.precision, pg.outer_epoch), report

    def process(i: int, pid: bytes):
        proto = net.protocols[pid]
        name = links.names[i]
        if task is None:
            layout = (Segment("payload", 0, payload_elements or 0),)
            for epoch in range(config.rounds):
                window = sum(step_time.step(i, epoch * config.local_steps + s)
                             for s in range(config.local_steps))
                yield Sleep(window)
                ledger.add(name, "compute", to_ns(window))
                pg = PseudoGradient(np.zeros(payload_elements or 0), layout,
                                    config.reduce_precision, epoch)
                yield from reduce(i, proto, pg)
            finish_ns[i] = net.clock.now_ns
            return None
        sh = tasks.shard(task, i, k)

        def round_end(state):
            if on_round_end is not None:
                on_round_end(i, state, net.clock.now_ns)

        ctx = engine.LoopContext(config, task, sh, emit=sink, evaluate=evaluate and i == 0,
                                 step_seconds=lambda s: step_time.step(i, s),
                                 on_round_end=round_end, extra={"worker": i})
        if initial_states:
            state = initial_states[i]
        else:
            state = engine.init_engine(config, tasks.init_params(task))
        loop = engine.training_loop(state, ctx)
        value = None
        while True:
            try:
                op = loop.send(value)
            except StopIteration as stop:
                states[i] = stop.value
                finish_ns[i] = net.clock.now_ns
                return stop.value
            if isinstance(op, engine.Compute):
                yield Sleep(op.seconds)
                ledger.add(name, "compute", to_ns(op.seconds))
                value = None
            else:
                value = yield from reduce(i, proto, op.pseudo_grad)

    for i, pid in enumerate(ids):
        at = start_times[i] / SEC if start_times else 0.0
        net.spawn(pid, process(i, pid), at)

    counters: dict = {}
    plans = [f for f in faults if f.on_type is not None]
    for f in faults:
        if f.at is not None:
            net.kill_at(ids[f.worker], f.at)

    if plans:
        def hook(pid, op):
            mtype = op.data[5]
            for f in plans:
                if ids[f.worker] != pid or f.on_type != mtype:
                    continue
                if f.outer_epoch is not None and wire.decode(op.data).outer_epoch != f.outer_epoch:
                    continue
                counters[id(f)] = counters.get(id(f), 0) + 1
                if counters[id(f)] == f.count:
                    return f.when
            return None
        net.fault_hook = hook

    net.run()
    errors = {i: net.procs[pid].error for i, pid in enumerate(ids) if net.procs[pid].error is not None}
    wall = max(finish_ns.values()) / SEC if finish_ns else net.now()
    return SimResult(states, errors, ledger, records, reports, wall, ids, net,
                     contributions, results, finish_ns)


def _account(ledger: UtilizationLedger, name: str, report) -> None:
    start, decided, end = to_ns(report.started), to_ns(report.decided), to_ns(report.finished)
    ledger.add(name, "idle", decided - start)
    ledger.add(name, "comm", end - decided)


def simulate_allreduce(contributions, links: LinkMatrix, precision: str = "fp32",
                       settings: ProtocolSettings | None = None, seed: int = 0):
    """One all-reduce of ``contributions`` (worker order) over virtual links.

    Returns ``(results, reports, seconds)`` indexed by worker.
    """
    k = len(contributions)
    settings = settings or ProtocolSettings()
    ids = make_peer_ids(k, seed)
    net = SimNetwork(links, {pid: i for i, pid in enumerate(ids)})
    members = Membership.create([PeerInfo(pid, f"sim:{i}") for i, pid in enumerate(ids)],
                                quorum_min=settings.quorum_min)
    out: dict = {}

    def process(i, proto):
        out[i] = yield from proto.all_reduce(0, np.asarray(contributions[i], np.float64), precision)

    for i, pid in enumerate(ids):
        proto = PeerProtocol(pid, "bench", members, settings)
        net.add_peer(proto)
        net.spawn(pid, process(i, proto))
    net.run()
    missing = [i for i in range(k) if i not in out]
    if missing:
        raise CollectiveError(f"workers {missing} did not finish the all-reduce")
    return [out[i][0] for i in range(k)], [out[i][1] for i in range(k)], net.now()
