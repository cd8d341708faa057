import numpy as np
import pytest

from diloco import engine, netsim
from diloco.errors import ConfigError
from diloco.netsim import LinkMatrix, UtilizationLedger, VirtualClock, WorkerTime

from simhelpers import SMALL_TASK


def test_parse_link_table():
    links = LinkMatrix.parse("""
        workers a b c
        latency_ms 5
        a b 100
        a c 50 20 *
        b c 10
    """)
    assert links.names == ("a", "b", "c")
    assert links.bandwidth_mbits[0, 2] == links.bandwidth_mbits[2, 0] == 50
    assert links.latency_ms[0, 2] == 20 and links.latency_ms[0, 1] == 5
    assert ("a", "c") in links.interpolated
    assert links.slowest() == 10


def test_asymmetric_table_needs_both_directions():
    with pytest.raises(ConfigError):
        LinkMatrix.parse("workers a b\nasymmetric\na b 10\n")
    links = LinkMatrix.parse("workers a b\nasymmetric\na b 10\nb a 20\n")
    assert links.bandwidth_mbits[0, 1] == 10 and links.bandwidth_mbits[1, 0] == 20


def test_bad_tables():
    with pytest.raises(ConfigError):
        LinkMatrix.parse("a b 10\n")
    with pytest.raises(ConfigError):
        LinkMatrix.parse("workers a b\na z 10\n")


def test_sample_matrix_band():
    links = LinkMatrix.sample()
    off = links.bandwidth_mbits[~np.eye(4, dtype=bool)]
    assert links.size == 4 and off.min() == 127 and off.max() == 935
    assert len(links.interpolated) == 6


def test_transfer_time():
    assert netsim.transfer_time(1_000_000, 8.0) == pytest.approx(1.0)
    assert netsim.transfer_time(0, 8.0, 30.0) == pytest.approx(0.03)
    with pytest.raises(ConfigError):
        netsim.transfer_time(1, 0.0)


def test_ring_bound_uses_slowest_edge():
    links = LinkMatrix.uniform(4, 100.0).with_bandwidth(1, 2, 25.0)
    assert netsim.ring_time_bound(4_000_000, links) == pytest.approx(6 * 1_000_000 * 8 / 25e6)
    # in ring order 0,1,3,2 the slow 1-2 link is never used
    assert netsim.ring_time_bound(4_000_000, links, order=[0, 1, 3, 2]) == pytest.approx(6 * 8e6 / 100e6)


def test_clock_orders_ties_deterministically():
    clock = VirtualClock()
    clock.schedule(5, "b", (2,))
    clock.schedule(5, "a", (1,))
    clock.schedule(3, "c", (9,))
    assert [clock.pop() for _ in range(3)] == ["c", "a", "b"]
    with pytest.raises(ValueError):
        clock.schedule(1, "late")


def test_utilization_exact_case():
    ledger = UtilizationLedger.single(4050.0, 300.0, 0.0)
    assert netsim.utilization(ledger) == pytest.approx(4050 / 4350)
    ledger = UtilizationLedger({"a": WorkerTime(10, 0, 0), "b": WorkerTime(0, 10, 0)})
    assert netsim.utilization(ledger) == 0.5
    assert netsim.utilization(ledger, "a") == 1.0


@pytest.mark.parametrize("precision", ["fp32", "fp16"])
@pytest.mark.parametrize("k", [2, 3, 4, 8])
def test_simulated_reduce_time_near_bound(k, precision):
    elems = 200_000
    links = LinkMatrix.uniform(k, 100.0)
    contribs = [np.ones(elems)] * k
    _, reports, _ = netsim.simulate_allreduce(contribs, links, precision)
    width = 4 if precision == "fp32" else 2
    bound = netsim.ring_time_bound(elems * width, links)
    for rep in reports:
        assert abs((rep.finished - rep.decided) - bound) / bound < 0.05


def test_time_invariant_under_joint_scaling():
    elems = 10_000
    a = netsim.simulate_allreduce([np.ones(elems)] * 4, LinkMatrix.uniform(4, 10.0), "fp32")[2]
    b = netsim.simulate_allreduce([np.ones(elems * 10)] * 4, LinkMatrix.uniform(4, 100.0), "fp32")[2]
    assert b == pytest.approx(a, rel=0.01)


def test_step_time_model():
    m = netsim.StepTimeModel(2.0, (1.0, 1.5))
    assert m.step(1, 0) == 3.0 and m.step(5, 0) == 2.0
    j = netsim.StepTimeModel(1.0, (), 0.1, seed=3)
    assert j.step(0, 7) == j.step(0, 7) != j.step(0, 8)
    with pytest.raises(ConfigError):
        netsim.StepTimeModel(1.0, (0.0,))


def test_ledger_splits_compute_comm_idle():
    cfg = engine.DilocoConfig(local_steps=2, num_workers=2, total_inner_steps=4, batch_size=4)
    res = netsim.run_simulated(cfg, SMALL_TASK, LinkMatrix.uniform(2, 1.0), netsim.StepTimeModel(1.0, (1.0, 2.0)),
                               evaluate=False)
    fast, slow = res.ledger.workers["w0"], res.ledger.workers["w1"]
    assert fast.compute_ns == 4 * netsim.SEC and slow.compute_ns == 8 * netsim.SEC
    assert fast.idle_ns >= 4 * netsim.SEC - netsim.SEC // 10
    assert fast.comm_ns > 0 and slow.comm_ns > 0


def test_comm_only_mode():
    cfg = engine.DilocoConfig(local_steps=10, num_workers=3, total_inner_steps=30)
    res = netsim.run_simulated(cfg, None, LinkMatrix.uniform(3, 80.0), netsim.StepTimeModel(0.1),
                               payload_elements=30_000)
    assert not res.errors
    assert [len(r) for r in res.reports.values()] == [3, 3, 3]
