import pytest

from diloco.collective.membership import Membership, PeerInfo, ReplicatedStore, heartbeat_tick
from diloco.errors import CollectiveError

A, B, C = b"\x01" * 16, b"\x02" * 16, b"\x03" * 16


def members():
    return Membership.create([PeerInfo(C, "c", 0.0), PeerInfo(A, "a", 0.0), PeerInfo(B, "b", 0.0)])


def test_peers_sorted_by_id_and_unique():
    m = members()
    assert [p.peer_id for p in m.peers] == [A, B, C]
    with pytest.raises(CollectiveError):
        Membership.create([PeerInfo(A), PeerInfo(A)])


def test_transitions_bump_epoch():
    m = members()
    m2 = m.set_status(B, "suspected")
    assert m2.epoch == m.epoch + 1 and m2.get(B).status == "suspected"
    assert m2.set_status(B, "suspected") is m2
    m3 = m2.set_status(B, "left")
    with pytest.raises(CollectiveError):
        m3.set_status(B, "live")
    with pytest.raises(CollectiveError):
        m.set_status(b"\x09" * 16, "left")


def test_heartbeat_aging():
    m = members().touch(A, 9.5).touch(B, 5.0).touch(C, 1.0)
    m = heartbeat_tick(m, 10.0, suspect_after=2.0, evict_after=8.0)
    assert [p.status for p in m.peers] == ["live", "suspected", "left"]
    m = heartbeat_tick(m.touch(B, 10.0), 10.5, 2.0, 8.0)
    assert m.get(B).status == "live"


def test_self_is_never_aged():
    m = heartbeat_tick(members(), 100.0, 1.0, 2.0, self_id=A)
    assert m.get(A).status == "live" and m.get(B).status == "left"


def test_rejoin_after_leaving():
    m = members().set_status(C, "left")
    m = m.add(PeerInfo(C, "c2", 0.0, "joining"))
    assert m.get(C).status == "joining" and m.get(C).address == "c2"
    assert m.add(PeerInfo(A, "zz")).get(A).address == "a"


def test_store_last_writer_wins():
    s = ReplicatedStore()
    assert s.put_local("k", b"1") == 1
    assert not s.apply("k", 1, b"stale")
    assert s.apply("k", 5, b"new")
    assert s.get("k") == (5, b"new")
    assert s.put_local("k", b"x") == 6
    assert s.get("missing") is None
