import pytest

from hearth.kernel import Simulator
from hearth.mac import MacNode, MacTimings
from hearth.medium import Medium
from hearth.network import Coordinator, DeviceLink
from hearth.radio import Environment, RadioProfile


def rf_world(seed=0, env_kind="indoor", **medium_kw):
    sim = Simulator(seed=seed)
    medium = Medium(sim, Environment(kind=env_kind), **medium_kw)
    return sim, medium


def make_mac(sim, medium, name, *, addr=None, net_id=None, mode="selforg",
             mains=True, position=(0.0, 0.0), profile=None, timings=None):
    mac = MacNode(sim, medium, name, profile or RadioProfile(),
                  timings or MacTimings(), mode=mode, mains=mains,
                  addr=addr, net_id=net_id)
    mac.place(position)
    return mac


def make_coordinator(sim, medium, *, net_id=0x0001, permit_join=True,
                     beacons=True, position=(0.0, 0.0), timings=None):
    mac = make_mac(sim, medium, "coord", mains=True, position=position,
                   timings=timings)
    return Coordinator(sim, medium, mac, net_id=net_id, permit_join=permit_join,
                       beacons=beacons)


def make_device(sim, medium, name, device_id, *, coordinator=None,
                sleepy=True, position=(3.0, 0.0), mains=False, timings=None):
    mac = make_mac(sim, medium, name, mains=mains, position=position,
                   timings=timings)
    schedule = coordinator.schedule if coordinator is not None else None
    link = DeviceLink(sim, mac, device_id, sleepy=sleepy, schedule=schedule)
    return mac, link


def join_now(sim, link, net_id=0x0001, until_s=5.0):
    """Drive a join to completion; returns the assigned address."""
    out = {}

    def done(addr, err):
        out["addr"] = addr
        out["err"] = err

    link.join(net_id, done)
    deadline = sim.now + int(until_s * 1_000_000)
    sim.run_until(deadline)
    if out.get("err") is not None:
        raise out["err"]
    return out["addr"]


@pytest.fixture
def star():
    """A coordinator plus a helper to attach devices."""
    sim, medium = rf_world()
    coord = make_coordinator(sim, medium)
    return sim, medium, coord
