"""Peer membership, heartbeat-driven health, and the replicated metadata store."""

from __future__ import annotations

import threading
from dataclasses import dataclass, replace

from ..errors import CollectiveError

STATUSES = ("joining", "live", "suspected", "left")
_ALLOWED = {
    "joining": {"live", "left"},
    "live": {"suspected", "left"},
    "suspected": {"live", "left"},
    "left": set(),
}


@dataclass(frozen=True)
class PeerInfo:
    peer_id: bytes
    address: str = ""
    last_heartbeat: float = 0.0
    status: str = "live"

    @property
    def short(self) -> str:
        return self.peer_id.hex()[:8]


@dataclass(frozen=True)
class Membership:
    epoch: int
    peers: tuple  # PeerInfo sorted by peer_id
    quorum_min: int = 1

    @classmethod
    def create(cls, peers, quorum_min: int = 1, epoch: int = 1) -> "Membership":
        ordered = tuple(sorted(peers, key=lambda p: p.peer_id))
        ids = [p.peer_id for p in ordered]
        if len(set(ids)) != len(ids):
            raise CollectiveError("duplicate peer_id in membership")
        return cls(epoch, ordered, quorum_min)

    def get(self, peer_id: bytes) -> PeerInfo | None:
        for p in self.peers:
            if p.peer_id == peer_id:
                return p
        return None

    def ids(self, *statuses: str) -> list[bytes]:
        statuses = statuses or ("live",)
        return [p.peer_id for p in self.peers if p.status in statuses]

    def live_ids(self) -> list[bytes]:
        return self.ids("live")

    def set_status(self, peer_id: bytes, status: str) -> "Membership":
        """Transition one peer; bumps the epoch when the status actually changes."""
        cur = self.get(peer_id)
        if cur is None:
            raise CollectiveError(f"unknown peer {peer_id.hex()[:8]}")
        if cur.status == status:
            return self
        if status not in _ALLOWED[cur.status]:
            raise CollectiveError(f"illegal transition {cur.status} -> {status}")
        peers = tuple(replace(p, status=status) if p.peer_id == peer_id else p for p in self.peers)
        return replace(self, epoch=self.epoch + 1, peers=peers)

    def add(self, info: PeerInfo) -> "Membership":
        existing = self.get(info.peer_id)
        if existing is not None and existing.status != "left":
            return self
        others = [p for p in self.peers if p.peer_id != info.peer_id]
        peers = tuple(sorted(others + [info], key=lambda p: p.peer_id))
        return replace(self, epoch=self.epoch + 1, peers=peers)

    def touch(self, peer_id: bytes, timestamp: float) -> "Membership":
        """Record a heartbeat; status changes are left to :func:`heartbeat_tick`."""
        cur = self.get(peer_id)
        if cur is None or timestamp <= cur.last_heartbeat:
            return self
        peers = tuple(replace(p, last_heartbeat=timestamp) if p.peer_id == peer_id else p
                      for p in self.peers)
        return replace(self, peers=peers)


def heartbeat_tick(m: Membership, now: float, suspect_after: float, evict_after: float,
                   self_id: bytes | None = None) -> Membership:
    """Age every peer: silent > suspect_after is suspected, > evict_after has left.
    A suspected peer with a fresh heartbeat returns to live."""
    for p in m.peers:
        if p.peer_id == self_id or p.status == "left":
            continue
        age = now - p.last_heartbeat
        if age > evict_after:
            m = m.set_status(p.peer_id, "left")
        elif age > suspect_after:
            if p.status == "live":
                m = m.set_status(p.peer_id, "suspected")
        elif p.status == "suspected":
            m = m.set_status(p.peer_id, "live")
    return m


class ReplicatedStore:
    """Last-writer-wins key/value map; every peer holds a full replica."""

    def __init__(self):
        self._lock = threading.Lock()
        self._data: dict[str, tuple[int, bytes]] = {}

    def put_local(self, key: str, value: bytes) -> int:
        with self._lock:
            version = self._data.get(key, (0, b""))[0] + 1
            self._data[key] = (version, value)
            return version

    def apply(self, key: str, version: int, value: bytes) -> bool:
        with self._lock:
            if version <= self._data.get(key, (0, b""))[0]:
                return False
            self._data[key] = (version, value)
            return True

    def get(self, key: str) -> tuple[int, bytes] | None:
        with self._lock:
            return self._data.get(key)

    def items(self):
        with self._lock:
            return list(self._data.items())
