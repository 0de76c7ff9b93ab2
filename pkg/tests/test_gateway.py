import pytest

from hearth.client import GatewayUnreachable
from hearth.devices import SET_ACTUATOR, QUERY_STATE, encode_tlv
from hearth.kernel import MS, SECOND
from hearth.medium import LossWindow
from hearth.scenario import World
from hearth.wan import EnvelopeKind, WanEnvelope, sign_envelope


def plug_world(**kw):
    world = World(seed=kw.pop("seed", 1), **kw)
    plug = world.add_device("plug", 1, mains=True, position=(4.0, 0.0))
    alice = world.add_user("alice", secret="pw", admin=True)
    world.run_for(1.0)  # joins settle
    alice.login(gateway_secret="pw")
    world.run_for(0.5)
    return world, plug, alice


def test_command_round_trip_within_budget():
    world, plug, alice = plug_world()
    results = []
    alice.send_command(plug.addr, encode_tlv(SET_ACTUATOR, b"\x01"),
                       done=lambda payload, lat: results.append((payload, lat)))
    world.run_for(4.0)
    assert results, "no command outcome"
    payload, latency = results[0]
    assert payload["status"] == "ok"
    assert plug.terminal.state["on"] is True
    assert latency <= 3 * SECOND


def test_command_to_sleeping_device_meets_budget():
    world = World(seed=2)
    sensor = world.add_device("temp_humidity", 7, position=(5.0, 0.0),
                              poll_interval_s=2.0)
    alice = world.add_user("alice", secret="pw")
    world.run_for(1.0)
    alice.login(gateway_secret="pw")
    world.run_for(0.5)
    results = []
    alice.send_command(sensor.addr, encode_tlv(QUERY_STATE, b""),
                       done=lambda payload, lat: results.append((payload, lat)))
    world.run_for(4.0)
    assert results and results[0][0]["status"] == "ok"
    assert results[0][1] <= 3 * SECOND


def test_unknown_device_rejected():
    world, plug, alice = plug_world()
    results = []
    alice.send_command(0x55, encode_tlv(SET_ACTUATOR, b"\x01"),
                       done=lambda payload, lat: results.append(payload))
    world.run_for(1.0)
    assert results[0]["status"] == "error"
    assert results[0]["error"] == "UnknownDevice"


def test_tampered_envelope_rejected():
    world, plug, alice = plug_world()
    env = WanEnvelope(msg_id="alice:999", kind=EnvelopeKind.CMD, frm="alice",
                      to="gateway",
                      payload={"addr": plug.addr,
                               "tlv": encode_tlv(SET_ACTUATOR, b"\x01").hex(),
                               "token": alice.token})
    sign_envelope(env, alice.key)
    env.payload["tlv"] = encode_tlv(SET_ACTUATOR, b"\x00").hex()  # bit-flip in transit
    got = []
    alice._pending[env.msg_id] = (world.sim.now, lambda p, lat: got.append(p))
    world.fabric.deliver(world.rendezvous.on_envelope, env)
    world.run_for(1.0)
    assert got and got[0]["error"] == "IntegrityError"
    assert plug.terminal.state["on"] is False
    assert world.sim.trace.filter(kind="gw.integrity_reject")


def test_expired_token_asks_for_reauth():
    world = World(seed=3)
    world.add_device("plug", 1, mains=True)
    alice = world.add_user("alice", secret="pw")
    world.gateway.session_ttl_us = 2 * SECOND
    world.run_for(1.0)
    alice.login(gateway_secret="pw")
    world.run_for(0.5)
    world.run_for(3.0)  # session now expired
    got = []
    alice.admin("get_config", done=lambda p, lat: got.append(p))
    world.run_for(1.0)
    assert got[0]["error"] == "AuthFailed"
    assert got[0]["hint"] == "reauth"


def test_admin_roles_and_config():
    world = World(seed=4)
    world.add_device("plug", 1, mains=True)
    admin = world.add_user("boss", secret="pw", admin=True)
    guest = world.add_user("guest", secret="pw2", admin=False)
    world.run_for(1.0)
    admin.login(gateway_secret="pw")
    guest.login(gateway_secret="pw2")
    world.run_for(0.5)
    got = []
    admin.admin("set_config", {"key": "pppoe_user", "value": "home"},
                done=lambda p, lat: got.append(p))
    admin.admin("set_config", {"key": "pppoe_secret", "value": "hunter2"},
                done=lambda p, lat: got.append(p))
    admin.admin("set_config", {"key": "nonsense", "value": 1},
                done=lambda p, lat: got.append(p))
    guest.admin("set_config", {"key": "ssid", "value": "pwned"},
                done=lambda p, lat: got.append(p))
    admin.admin("get_config", done=lambda p, lat: got.append(p))
    world.run_for(1.0)
    assert got[0]["config"]["version"] == 1
    assert got[1]["config"]["pppoe_secret"] == "***"
    assert got[2]["error"] == "BadKey"
    assert got[3]["error"] == "Forbidden"
    assert got[4]["config"]["pppoe_user"] == "home"
    assert got[4]["config"]["version"] == 2


def test_wifi_flag_gates_simulated_attach():
    world, plug, alice = plug_world()
    got = []
    alice.admin("wifi_attach", {"client": "laptop"}, done=lambda p, lat: got.append(p))
    alice.admin("set_config", {"key": "wifi_enabled", "value": False},
                done=lambda p, lat: got.append(p))
    alice.admin("wifi_attach", {"client": "laptop"}, done=lambda p, lat: got.append(p))
    world.run_for(1.0)
    assert got[0]["attached"] is True
    assert got[2]["attached"] is False


def test_alarm_fanout_exactly_once_per_subscriber():
    world = World(seed=5)
    gas = world.add_device("gas", 3, position=(3.0, 0.0))
    alice = world.add_user("alice", secret="pw")
    bob = world.add_user("bob", secret="pw")
    world.run_for(1.0)
    alice.login(gateway_secret="pw")
    bob.login(gateway_secret="pw")
    world.run_for(0.5)
    alice.subscribe_alarms("push")
    bob.subscribe_alarms("push")
    world.run_for(0.5)
    gas.terminal.on_env({"level": 900})
    world.run_for(3.0)
    assert len(alice.inbox) == 1
    assert len(bob.inbox) == 1
    assert alice.inbox.entries[0]["alarm_id"] == bob.inbox.entries[0]["alarm_id"]
    assert alice.inbox.entries[0]["code"] == 0x05


def test_offline_subscriber_gets_alarm_on_relogin():
    world = World(seed=6)
    gas = world.add_device("gas", 3, position=(3.0, 0.0))
    alice = world.add_user("alice", secret="pw")
    world.run_for(1.0)
    alice.login(gateway_secret="pw")
    world.run_for(0.5)
    alice.subscribe_alarms("push")
    world.run_for(0.5)
    alice.logout()
    gas.terminal.on_env({"level": 900})
    world.run_for(2.0)
    assert len(alice.inbox) == 0
    alice.relogin()
    world.run_for(1.0)
    assert len(alice.inbox) == 1


def test_transparent_transmission_byte_identity():
    world, plug, alice = plug_world()
    seen = []
    original = plug.link.on_downlink
    plug.link.on_downlink = lambda payload, frame: (seen.append(bytes(payload)),
                                                    original(payload, frame))[1]
    tlv = encode_tlv(SET_ACTUATOR, b"\x01")
    alice.send_command(plug.addr, tlv)
    world.run_for(2.0)
    assert seen == [tlv]


def test_exactly_one_outcome_per_command_under_loss():
    world = World(seed=7)
    plugs = [world.add_device("plug", i, mains=True, position=(3.0 + i, 0.0))
             for i in range(1, 4)]
    alice = world.add_user("alice", secret="pw")
    world.run_for(1.0)
    alice.login(gateway_secret="pw")
    world.run_for(0.5)
    t0 = world.sim.now
    world.medium.loss_windows.append(LossWindow(t0, t0 + 20 * SECOND, 0.3))
    for k in range(12):
        plug = plugs[k % 3]
        world.sim.schedule_at(t0 + k * 500 * MS,
                              lambda p=plug: alice.send_command(
                                  p.addr, encode_tlv(SET_ACTUATOR, b"\x01")))
    world.run_for(30.0)
    submits = world.sim.trace.filter(kind="client.cmd_submit", entity="alice")
    acks = world.sim.trace.filter(kind="client.cmd_ack", entity="alice")
    assert len(submits) == 12
    assert len(acks) == 12
    assert len({e.detail["msg_id"] for e in acks}) == 12
    applies = world.sim.trace.filter(kind="dev.apply")
    assert len(applies) <= 12


def test_timeout_when_device_never_polls():
    world = World(seed=8)
    sleeper = world.add_device("temp_humidity", 9, poll_interval_s=3600.0,
                               report_interval_s=0)
    alice = world.add_user("alice", secret="pw")
    world.run_for(1.0)
    alice.login(gateway_secret="pw")
    world.run_for(0.5)
    got = []
    alice.send_command(sleeper.addr, encode_tlv(QUERY_STATE, b""),
                       done=lambda p, lat: got.append((p, lat)))
    world.run_for(8.0)
    assert len(got) == 1
    payload, latency = got[0]
    assert payload["status"] == "error" and payload["error"] == "Timeout"
    assert abs(latency - 5 * SECOND) < SECOND


def test_gateway_offline_surfaces_unreachable():
    world = World(seed=9)
    alice = world.add_user("alice", secret="pw")
    world.rendezvous.logout("gateway")
    with pytest.raises(GatewayUnreachable):
        alice.login(gateway_secret="pw")


def test_list_devices_snapshot():
    world = World(seed=10)
    world.add_device("plug", 1, mains=True)
    world.add_device("gas", 2)
    world.add_device("temp_humidity", 3)
    alice = world.add_user("alice", secret="pw")
    world.run_for(1.5)
    alice.login(gateway_secret="pw")
    world.run_for(0.5)
    got = []
    alice.list_devices(lambda devices, err: got.append(devices))
    world.run_for(1.0)
    assert len(got[0]) == 3
    kinds = sorted(d["kind"] for d in got[0])
    assert kinds == ["gas", "plug", "temp_humidity"]


def test_poll_mode_costs_fewer_envelopes_than_push():
    def run(mode):
        world = World(seed=11)
        gas = world.add_device("gas", 3, position=(3.0, 0.0))
        user = world.add_user("watcher", secret="pw")
        world.run_for(1.0)
        user.login(gateway_secret="pw")
        world.run_for(0.5)
        if mode == "push":
            user.subscribe_alarms("push")
        else:
            user.subscribe_alarms("poll", poll_interval_s=60.0)
        world.run_for(0.5)
        for k in range(5):
            world.sim.schedule_in(k * 2 * SECOND,
                                  lambda: gas.terminal.on_env({"level": 900}))
        world.run_for(70.0)
        user.poll_now()
        world.run_for(1.0)
        return user

    push_user = run("push")
    poll_user = run("poll")
    assert len(push_user.inbox) == 5
    assert len(poll_user.inbox) == 5
    assert poll_user.envelopes_received <= push_user.envelopes_received
    # batching: all five alarms arrived in at most two fetch replies
    batches = [e for e in poll_user.sim.trace.filter(kind="client.inbox")]
    assert len(batches) == 5
