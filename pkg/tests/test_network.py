import pytest

from hearth.frame import COORDINATOR_ADDR
from hearth.kernel import MS, SECOND
from hearth.network import (
    BusyError,
    CapacityError,
    NetworkError,
    NoNetworkError,
    SlaveEntry,
    UnknownDeviceError,
)

from collections import deque

from conftest import join_now, make_coordinator, make_device, rf_world


def test_discovery_latency_near_budget(star):
    sim, medium, coord = star
    mac, link = make_device(sim, medium, "d1", 0xA1)
    results = {}
    # start away from a periodic beacon so the probe response is the first hit
    sim.run_until(110 * MS)
    link.discover(lambda r, e: results.update(r=r, e=e))
    sim.run_until(SECOND)
    assert results["e"] is None
    assert results["r"]["net_id"] == 0x0001
    assert results["r"]["permit"] is True
    assert 24 * MS <= results["r"]["latency_us"] <= 36 * MS


def test_discovery_out_of_range_times_out(star):
    sim, medium, coord = star
    mac, link = make_device(sim, medium, "far", 0xA2, position=(5000.0, 0.0))
    results = {}
    link.discover(lambda r, e: results.update(r=r, e=e))
    sim.run_until(2 * SECOND)
    assert results["r"] is None
    assert isinstance(results["e"], NoNetworkError)


def test_discovery_reports_join_disabled():
    sim, medium = rf_world()
    coord = make_coordinator(sim, medium, permit_join=False)
    mac, link = make_device(sim, medium, "d1", 0xA3)
    results = {}
    sim.run_until(110 * MS)
    link.discover(lambda r, e: results.update(r=r, e=e))
    sim.run_until(SECOND)
    assert results["r"]["permit"] is False


def test_join_assigns_lowest_address_with_budgeted_latency(star):
    sim, medium, coord = star
    mac, link = make_device(sim, medium, "d1", 0xB1)
    sim.run_until(110 * MS)
    addr = join_now(sim, link)
    assert addr == 0x01
    ev = sim.trace.filter(kind="net.join", entity="d1")[0]
    assert 14 * MS <= ev.detail["latency_us"] <= 16 * MS
    assert coord.registry.slaves[0x01].device_id == 0xB1


def test_sequential_joins_count_up(star):
    sim, medium, coord = star
    addrs = []
    for i in range(4):
        mac, link = make_device(sim, medium, f"d{i}", 0xC0 + i, position=(2.0 + i, 0))
        addrs.append(join_now(sim, link))
    assert addrs == [0x01, 0x02, 0x03, 0x04]


def test_capacity_error_when_full(star):
    sim, medium, coord = star
    # prefill 254 slaves; the next join must be rejected
    for addr in range(0x01, 0xFF):
        coord.registry.slaves[addr] = SlaveEntry(addr=addr, device_id=0x1000 + addr)
        coord.registry.by_device_id[0x1000 + addr] = addr
        coord.queues[addr] = deque()
    assert len(coord.registry.slaves) == 254
    mac, link = make_device(sim, medium, "extra", 0xDEAD)
    out = {}
    link.join(0x0001, lambda a, e: out.update(a=a, e=e))
    sim.run_until(2 * SECOND)
    assert isinstance(out["e"], CapacityError)
    assert len(coord.registry.slaves) == 254


def test_rejoin_is_idempotent(star):
    sim, medium, coord = star
    mac, link = make_device(sim, medium, "d1", 0xB7)
    addr = join_now(sim, link)
    link.joined = False  # device lost its state; coordinator remembers
    assert join_now(sim, link) == addr
    assert len(coord.registry.slaves) == 1


def test_evict_frees_address_for_reuse(star):
    sim, medium, coord = star
    mac, link = make_device(sim, medium, "d1", 0xB8)
    addr = join_now(sim, link)
    coord.evict(addr)
    assert addr not in coord.registry.slaves
    mac2, link2 = make_device(sim, medium, "d2", 0xB9, position=(2.5, 0))
    assert join_now(sim, link2) == addr


def test_evict_drops_queued_payloads_with_trace(star):
    sim, medium, coord = star
    mac, link = make_device(sim, medium, "d1", 0xBA)
    addr = join_now(sim, link)
    mac.sleep()
    sim.run_until(sim.now + 10 * MS)
    for k in range(3):
        coord.route_downlink(addr, bytes([k + 1]))
    coord.evict(addr)
    drops = [e for e in sim.trace.filter(kind="net.drop") if e.detail["reason"] == "evicted"]
    assert len(drops) == 3
    assert len(sim.trace.filter(kind="net.evict")) == 1


def test_evict_errors(star):
    sim, medium, coord = star
    with pytest.raises(NetworkError):
        coord.evict(COORDINATOR_ADDR)
    with pytest.raises(UnknownDeviceError):
        coord.evict(0x77)


def test_route_downlink_unknown_address(star):
    sim, medium, coord = star
    with pytest.raises(UnknownDeviceError):
        coord.route_downlink(0x77, b"\x01")


def test_downlink_to_awake_device_is_immediate(star):
    sim, medium, coord = star
    mac, link = make_device(sim, medium, "d1", 0xC1, sleepy=False, mains=True)
    mac.mains = True
    addr = join_now(sim, link)
    got = []
    link.on_downlink = lambda payload, f: got.append(payload)
    t0 = sim.now
    receipts = []
    coord.route_downlink(addr, b"\x42", done=lambda o: receipts.append(o))
    sim.run_until(t0 + coord.timings.superframe_period_us)
    assert got == [b"\x42"]
    assert receipts and receipts[0].delivered


def test_downlink_to_sleeping_device_via_poll(star):
    sim, medium, coord = star
    mac, link = make_device(sim, medium, "d1", 0xC2)
    addr = join_now(sim, link)
    got = []
    link.on_downlink = lambda payload, f: got.append((sim.now, payload))
    poll_interval = 2 * SECOND

    def poll_cycle():
        mac.wake()
        link.poll_drain(lambda: mac.sleep())
        sim.schedule_in(poll_interval, poll_cycle)

    mac.sleep()
    sim.schedule_in(poll_interval, poll_cycle)
    base = sim.now
    queued_at = base + 500 * MS
    sim.schedule_at(queued_at, lambda: coord.route_downlink(addr, b"\x07"))
    sim.run_until(base + 5 * SECOND)
    assert len(got) == 1
    arrival, payload = got[0]
    assert payload == b"\x07"
    # worst case: one full poll interval + wake latency + exchange slack
    assert arrival <= queued_at + poll_interval + 15 * MS + 50 * MS
    assert sim.trace.filter(kind="net.queue")
    assert sim.trace.filter(kind="net.deliver")


def test_poll_drains_multiple_queued_payloads(star):
    sim, medium, coord = star
    mac, link = make_device(sim, medium, "d1", 0xC3)
    addr = join_now(sim, link)
    got = []
    link.on_downlink = lambda payload, f: got.append(payload)
    mac.sleep()
    sim.run_until(sim.now + 10 * MS)
    for k in range(3):
        coord.route_downlink(addr, bytes([0x10 + k]))
    mac.wake()
    drained = []
    link.poll_drain(lambda: drained.append(sim.now))
    sim.run_until(sim.now + 2 * SECOND)
    assert got == [b"\x10", b"\x11", b"\x12"]
    assert drained


def test_indirect_queue_overflow_is_busy(star):
    sim, medium, coord = star
    mac, link = make_device(sim, medium, "d1", 0xC4)
    addr = join_now(sim, link)
    mac.sleep()
    sim.run_until(sim.now + 10 * MS)
    for k in range(16):
        coord.route_downlink(addr, bytes([k]))
    with pytest.raises(BusyError):
        coord.route_downlink(addr, b"\xff")


def test_cancelled_downlink_never_delivered(star):
    sim, medium, coord = star
    mac, link = make_device(sim, medium, "d1", 0xC5)
    addr = join_now(sim, link)
    got = []
    link.on_downlink = lambda payload, f: got.append(payload)
    mac.sleep()
    sim.run_until(sim.now + 10 * MS)
    ticket = coord.route_downlink(addr, b"\x42")
    ticket.cancel()
    mac.wake()
    link.poll_drain(lambda: None)
    sim.run_until(sim.now + 2 * SECOND)
    assert got == []
    drops = [e for e in sim.trace.filter(kind="net.drop") if e.detail["reason"] == "cancelled"]
    assert drops


def test_gts_reservation_capacity(star):
    sim, medium, coord = star
    mac, link = make_device(sim, medium, "d1", 0xC6, sleepy=False, mains=True)
    addr = join_now(sim, link)
    granted = coord.reserve_gts(addr, 1)
    assert len(granted) == 1
    granted2 = coord.reserve_gts(addr, 3)
    assert len(granted2) == 3
    with pytest.raises(CapacityError):
        coord.reserve_gts(addr, 1)
    coord.release_gts(addr)
    assert coord.reserve_gts(addr, 4)
