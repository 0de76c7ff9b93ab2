from hearth.kernel import Simulator
from hearth.medium import Medium, UnknownNodeError
from hearth.radio import Environment, RadioProfile, link_margin_dB

import pytest


class StubListener:
    def __init__(self):
        self.frames = []

    def is_listening(self, start, end):
        return True

    def deliver(self, data, src, power):
        self.frames.append((data, src))


def make_medium(seed=0, env_kind="outdoor"):
    sim = Simulator(seed=seed)
    medium = Medium(sim, Environment(kind=env_kind))
    return sim, medium


def test_single_transmission_delivered_at_10m():
    sim, medium = make_medium()
    profile = RadioProfile(tx_power_dBm=0.0)
    rx = StubListener()
    medium.register("tx", (0, 0), profile, StubListener())
    medium.register("rx", (10, 0), profile, rx)
    medium.transmit("tx", b"\x01" * 20)
    sim.run_until(10_000)
    assert len(rx.frames) == 1
    assert rx.frames[0][1] == "tx"
    assert len(sim.trace.filter(kind="rf.tx")) == 1


def test_overlapping_transmissions_corrupt_both():
    sim, medium = make_medium()
    profile = RadioProfile(tx_power_dBm=0.0)
    rx = StubListener()
    medium.register("a", (0, 0), profile, StubListener())
    medium.register("b", (5, 0), profile, StubListener())
    medium.register("rx", (2, 0), profile, rx)
    medium.transmit("a", b"\x01" * 30)
    medium.transmit("b", b"\x02" * 30)
    sim.run_until(100_000)
    assert rx.frames == []
    collisions = sim.trace.filter(kind="rf.collision", entity="rx")
    assert len(collisions) == 2


def test_below_sensitivity_no_event_at_all():
    sim, medium = make_medium()
    profile = RadioProfile(tx_power_dBm=0.0)
    rx = StubListener()
    medium.register("tx", (0, 0), profile, StubListener())
    # 0dBm outdoor closes around 423m; 5km is far outside
    medium.register("rx", (5000, 0), profile, rx)
    medium.transmit("tx", b"\x01" * 20)
    sim.run_until(100_000)
    assert rx.frames == []
    assert sim.trace.filter(kind="rf.collision") == []


def test_link_closure_iff_margin_non_negative():
    env = Environment(kind="outdoor")
    profile = RadioProfile(tx_power_dBm=20.0)
    check_rng = Simulator(seed=99).rng
    for _ in range(60):
        d = 1.0 + check_rng.random() * 2500.0
        sim, medium = make_medium()
        rx = StubListener()
        medium.register("tx", (0, 0), profile, StubListener())
        medium.register("rx", (d, 0), profile, rx)
        medium.transmit("tx", b"\x01" * 16)
        sim.run_until(100_000)
        delivered = len(rx.frames) == 1
        assert delivered == (link_margin_dB(d, profile, env) >= 0), f"at {d}m"


def test_monotone_range():
    profile = RadioProfile(tx_power_dBm=20.0)
    distances = [10.0, 100.0, 500.0, 1000.0, 1499.0, 1501.0, 2000.0]
    delivered = []
    for d in distances:
        sim, medium = make_medium()
        rx = StubListener()
        medium.register("tx", (0, 0), profile, StubListener())
        medium.register("rx", (d, 0), profile, rx)
        medium.transmit("tx", b"\x01" * 16)
        sim.run_until(100_000)
        delivered.append(len(rx.frames) == 1)
    # once delivery stops it never resumes at larger distance
    assert delivered == sorted(delivered, reverse=True)
    assert delivered[0] and not delivered[-1]


def test_unregistered_node_rejected():
    sim, medium = make_medium()
    with pytest.raises(UnknownNodeError):
        medium.transmit("ghost", b"\x00")
    with pytest.raises(UnknownNodeError):
        medium.channel_busy("ghost")


def test_half_duplex_listener_gating():
    class DeafWhileTx(StubListener):
        def is_listening(self, start, end):
            return False

    sim, medium = make_medium()
    profile = RadioProfile(tx_power_dBm=0.0)
    rx = DeafWhileTx()
    medium.register("tx", (0, 0), profile, StubListener())
    medium.register("rx", (10, 0), profile, rx)
    medium.transmit("tx", b"\x01" * 20)
    sim.run_until(10_000)
    assert rx.frames == []


def test_carrier_sense_sees_active_transmission():
    sim, medium = make_medium()
    profile = RadioProfile(tx_power_dBm=0.0)
    medium.register("a", (0, 0), profile, StubListener())
    medium.register("b", (10, 0), profile, StubListener())
    assert not medium.channel_busy("b")
    medium.transmit("a", b"\x01" * 100)
    busy_seen = []
    sim.schedule_at(10, lambda: busy_seen.append(medium.channel_busy("b")))
    end = sim.trace.filter(kind="rf.tx")[0].detail["end"]
    sim.schedule_at(end, lambda: busy_seen.append(medium.channel_busy("b")))
    sim.run_until(100_000)
    assert busy_seen == [True, False]
