import threading
import time

import numpy as np
import pytest

from diloco.collective.protocol import ProtocolSettings
from diloco.collective.ring import reference_ring
from diloco.collective.tcp import TcpCollective, parse_address
from diloco.errors import ConfigError, JoinError
from diloco.tensor import PseudoGradient, make_layout


@pytest.fixture
def peers(request):
    made = []

    def make(k, run_id="t", **settings):
        s = ProtocolSettings(**{"barrier_timeout": 2.0, "ring_timeout": 2.0, **settings})
        group = [TcpCollective(run_id, settings=s, suspect_after=0.5, evict_after=1.0) for _ in range(k)]
        made.extend(group)
        group[0].join(None)
        for p in group[1:]:
            p.join(group[0].address, timeout=5.0)
        for p in group:
            p.wait_for_peers(k, timeout=5.0)
        return group

    yield make
    for p in made:
        p.close()


def reduce_all(group, contribs, precision, epoch=0):
    layout = make_layout([("w", len(contribs[0]))])
    out, errors = {}, {}

    def work(i):
        try:
            out[i] = group[i].all_reduce_avg(PseudoGradient(contribs[i], layout, precision, epoch))
        except Exception as exc:
            errors[i] = exc

    threads = [threading.Thread(target=work, args=(i,)) for i in range(len(group))]
    for t in threads:
        t.start()
    for t in threads:
        t.join(30)
    return out, errors


def test_parse_address():
    assert parse_address("127.0.0.1:80") == ("127.0.0.1", 80)
    with pytest.raises(ConfigError):
        parse_address("nohost")


@pytest.mark.parametrize("precision", ["fp32", "fp16"])
def test_four_peers_match_reference(peers, precision):
    group = peers(4)
    r = np.random.default_rng(4)
    contribs = [r.standard_normal(1001) for _ in range(4)]
    out, errors = reduce_all(group, contribs, precision)
    assert not errors
    order = sorted(range(4), key=lambda i: group[i].peer_id)
    expect = reference_ring([contribs[i] for i in order], precision).astype(np.float64)
    for i in range(4):
        pg, report = out[i]
        assert np.array_equal(pg.data, expect)
        assert len(report.contributors) == 4


def test_consecutive_rounds(peers):
    group = peers(3)
    for epoch in range(3):
        contribs = [np.full(10, float(i + epoch)) for i in range(3)]
        out, errors = reduce_all(group, contribs, "fp32", epoch)
        assert not errors
        assert all(np.allclose(out[i][0].data, 1.0 + epoch) for i in range(3))


def test_dead_peer_is_excluded(peers):
    group = peers(3)
    victim = group[2]
    victim.close()
    time.sleep(0.1)
    out, errors = reduce_all(group[:2], [np.ones(8), 3 * np.ones(8)], "fp32")
    assert not errors
    assert np.array_equal(out[0][0].data, out[1][0].data)
    assert np.allclose(out[0][0].data, 2.0)
    assert len(out[0][1].contributors) == 2


def test_wrong_run_id_is_rejected(peers):
    (host,) = peers(1)
    other = TcpCollective("different")
    try:
        with pytest.raises(ConfigError):
            other.join(host.address, timeout=3.0)
    finally:
        other.close()


def test_unreachable_rendezvous():
    lonely = TcpCollective("t")
    try:
        with pytest.raises(JoinError):
            lonely.join("127.0.0.1:1", timeout=0.3)
    finally:
        lonely.close()


def test_state_hand_off(peers):
    a, b = peers(2)
    a.publish_state(7, b"weights")
    epoch, blob = b.fetch_state(5, timeout=3.0)
    assert (epoch, blob) == (7, b"weights")
