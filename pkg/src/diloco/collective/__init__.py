"""Peer membership, wire format, ring all-reduce and the fault-tolerant round
protocol, plus the socket transport."""

from .membership import Membership, PeerInfo, ReplicatedStore, heartbeat_tick
from .protocol import PeerProtocol, ProtocolSettings, ReduceReport, Recv, Send

__all__ = [
    "Membership", "PeerInfo", "ReplicatedStore", "heartbeat_tick",
    "PeerProtocol", "ProtocolSettings", "ReduceReport", "Recv", "Send",
]
