"""Scenario files and world construction.

A scenario JSON file fully determines a run: seed, duration, radio and MAC
parameters, node placements, users and NAT profiles, workload, and fault
injections.  `World` is the programmatic form of the same thing; the
validator gives field-path diagnostics so the CLI can reject a malformed
file with a precise message.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

from .camera import Camera
from .client import Client
from .devices import (
    DeviceSpec,
    DeviceTerminal,
    KindRegistry,
    QUERY_STATE,
    SET_ACTUATOR,
    encode_tlv,
)
from .frame import COORDINATOR_ADDR
from .gateway import Gateway
from .kernel import Simulator, us_from_s
from .mac import MacNode, MacTimings
from .medium import LossWindow, Medium
from .nat import NatProfile, NatType
from .network import Coordinator, DeviceLink, SlaveEntry
from .radio import Environment, RadioProfile
from .rendezvous import Rendezvous
from .wan import WanFabric, WanLossWindow

SCHEMA_VERSION = 1

NAT_NAMES = {n.value for n in NatType}
DEVICE_DEFAULTS = {"report_interval_s": 10.0, "poll_interval_s": 2.0}


class ScenarioError(Exception):
    """Scenario file rejected; message carries the offending field path."""


@dataclass
class DeviceHandle:
    device_id: int
    spec: DeviceSpec
    mac: MacNode
    link: DeviceLink
    terminal: DeviceTerminal
    addr: int | None = None
    join_error: str = ""


class World:
    def __init__(self, *, seed: int = 0, env_kind: str = "indoor",
                 radio: RadioProfile | None = None,
                 timings: MacTimings | None = None,
                 mac_mode: str = "selforg",
                 static_addressing: bool = False,
                 hop_latency_ms: float = 20.0,
                 p2p_latency_ms: float = 10.0,
                 gateway_nat: str = "port_restricted",
                 gateway_secret: str = "gw-secret",
                 gateway_position=(0.0, 0.0),
                 net_id: int = 0x0001,
                 beacons: bool = True,
                 env_exponent: float | None = None):
        self.sim = Simulator(seed=seed)
        self.env = Environment(kind=env_kind, path_loss_exponent=env_exponent)
        self.medium = Medium(self.sim, self.env)
        self.radio = radio or RadioProfile()
        self.timings = timings or MacTimings()
        self.mac_mode = mac_mode
        self.static_addressing = static_addressing
        self.net_id = net_id
        self.registry = KindRegistry()
        self.fabric = WanFabric(self.sim,
                                hop_latency_us=round(hop_latency_ms * 1000),
                                p2p_latency_us=round(p2p_latency_ms * 1000))
        self.rendezvous = Rendezvous(self.sim, self.fabric)
        coord_mac = MacNode(self.sim, self.medium, "coord", self.radio,
                            self.timings, mode=mac_mode, mains=True)
        coord_mac.place(gateway_position)
        self.coordinator = Coordinator(self.sim, self.medium, coord_mac,
                                       net_id=net_id, beacons=beacons and mac_mode == "selforg")
        self.gateway = Gateway(self.sim, self.coordinator, self.rendezvous,
                               self.fabric, secret=gateway_secret,
                               nat=NatProfile(NatType(gateway_nat)), users={})
        self.gateway_secret = gateway_secret
        self.devices: dict[int, DeviceHandle] = {}
        self.clients: dict[str, Client] = {}
        self.cameras: dict[str, Camera] = {}
        self._static_addr_next = 1

    # -- population -------------------------------------------------------------

    def add_device(self, kind_name: str, device_id: int, *,
                   position=(3.0, 0.0), mains: bool = False,
                   report_interval_s: float | None = 10.0,
                   poll_interval_s: float = 2.0,
                   armed: bool = False, report_pad_to: int = 32,
                   thresholds: dict | None = None,
                   gts_slots: int = 0,
                   join_at_s: float = 0.0,
                   label: str = "") -> DeviceHandle:
        if device_id in self.devices:
            raise ScenarioError(f"devices: duplicate id {device_id}")
        kind = self.registry.get(kind_name)
        name = f"dev{device_id}"
        mac = MacNode(self.sim, self.medium, name, self.radio, self.timings,
                      mode=self.mac_mode, mains=mains)
        mac.place(position)
        link = DeviceLink(self.sim, mac, device_id, sleepy=not mains,
                          schedule=self.coordinator.schedule)
        spec = DeviceSpec(device_id=device_id, kind=kind, mains=mains,
                          armed=armed,
                          report_interval_s=report_interval_s or 0.0,
                          poll_interval_s=poll_interval_s,
                          report_pad_to=report_pad_to,
                          thresholds=thresholds or {})
        terminal = DeviceTerminal(self.sim, mac, link, spec)
        handle = DeviceHandle(device_id=device_id, spec=spec, mac=mac,
                              link=link, terminal=terminal)
        self.devices[device_id] = handle
        self.gateway.register_device_meta(device_id, kind_name, label)
        self.sim.emit(name, "meta.device", device_id=device_id, device_kind=kind_name,
                      mains=mains,
                      report_interval_s=report_interval_s or 0.0,
                      poll_interval_s=poll_interval_s,
                      report_pad_to=report_pad_to,
                      rx_mA=mac.ledger.currents_mA["RX_LISTEN"],
                      tx_mA=mac.ledger.currents_mA["TX"],
                      sleep_mA=mac.ledger.currents_mA["SLEEP"],
                      capacity_mAh=mac.ledger.capacity_mAh,
                      rate_bps=self.radio.rate_bps,
                      created_us=self.sim.now)
        if self.static_addressing:
            self._static_join(handle)
            if gts_slots:
                self.coordinator.reserve_gts(handle.addr, gts_slots)
        else:
            self.sim.schedule_at(us_from_s(join_at_s) if join_at_s else self.sim.now,
                                 lambda: self._join_flow(handle, gts_slots))
        return handle

    def _static_join(self, handle: DeviceHandle) -> None:
        addr = self._static_addr_next
        self._static_addr_next += 1
        if addr > 0xFE:
            raise ScenarioError("devices: more than 254 static addresses requested")
        entry = SlaveEntry(addr=addr, device_id=handle.device_id,
                           sleepy=not handle.spec.mains, joined_at=self.sim.now)
        self.coordinator.registry.slaves[addr] = entry
        self.coordinator.registry.by_device_id[handle.device_id] = addr
        self.coordinator.queues.setdefault(addr, deque())
        handle.link.joined = True
        handle.link.addr = addr
        handle.link.net_id = self.net_id
        handle.mac.addr = addr
        handle.mac.net_id = self.net_id
        handle.addr = addr
        handle.terminal.start()

    def _join_flow(self, handle: DeviceHandle, gts_slots: int) -> None:
        def joined(addr, err):
            if err is not None:
                handle.join_error = type(err).__name__
                return
            handle.addr = addr
            if gts_slots:
                self.coordinator.reserve_gts(addr, gts_slots)
            handle.terminal.start()

        handle.link.join(self.net_id, joined)

    def add_user(self, name: str, *, secret: str = "pw", nat: str = "full_cone",
                 admin: bool = False) -> Client:
        self.rendezvous.register_user(name, secret)
        self.gateway.users[name] = {"secret": secret, "admin": admin}
        client = Client(self.sim, self.rendezvous, self.fabric, name, secret,
                        NatProfile(NatType(nat)))
        self.clients[name] = client
        return client

    def add_camera(self, camera_id: str, *, nat: str = "open") -> Camera:
        camera = Camera(self.sim, self.rendezvous, self.fabric, camera_id,
                        nat=NatProfile(NatType(nat)))
        camera.event_sink = self.gateway.post_event
        self.gateway.register_camera(camera)
        self.cameras[camera_id] = camera
        return camera

    # -- running -------------------------------------------------------------------

    def run_for(self, seconds: float):
        return self.sim.run_until(self.sim.now + us_from_s(seconds))

    def run_until_s(self, seconds: float):
        return self.sim.run_until(us_from_s(seconds))


# -- scenario file validation ----------------------------------------------------


def _expect(cond, path, message):
    if not cond:
        raise ScenarioError(f"{path}: {message}")


def _number(obj, path, *, minimum=None, maximum=None):
    _expect(isinstance(obj, (int, float)) and not isinstance(obj, bool),
            path, f"expected a number, got {type(obj).__name__}")
    if minimum is not None:
        _expect(obj >= minimum, path, f"must be >= {minimum}")
    if maximum is not None:
        _expect(obj <= maximum, path, f"must be <= {maximum}")
    return obj


def _string(obj, path, *, choices=None):
    _expect(isinstance(obj, str), path, f"expected a string, got {type(obj).__name__}")
    if choices is not None:
        _expect(obj in choices, path, f"must be one of {sorted(choices)}")
    return obj


def _position(obj, path):
    _expect(isinstance(obj, (list, tuple)) and len(obj) == 2, path,
            "expected [x, y] in metres")
    return (_number(obj[0], f"{path}[0]"), _number(obj[1], f"{path}[1]"))


def validate_scenario(doc: dict) -> dict:
    _expect(isinstance(doc, dict), "$", "scenario must be a JSON object")
    version = doc.get("schema_version")
    _expect(version == SCHEMA_VERSION, "schema_version",
            f"expected {SCHEMA_VERSION}, got {version!r}")
    _number(doc.get("seed", 0), "seed", minimum=0)
    _number(doc.get("duration_s", 0), "duration_s", minimum=0)

    env = doc.get("environment", {})
    _expect(isinstance(env, dict), "environment", "expected an object")
    if "kind" in env:
        _string(env["kind"], "environment.kind", choices={"indoor", "outdoor"})

    radio = doc.get("radio", {})
    _expect(isinstance(radio, dict), "radio", "expected an object")
    if "tx_power_dbm" in radio:
        _number(radio["tx_power_dbm"], "radio.tx_power_dbm", minimum=-10, maximum=20)
    if "rate_bps" in radio:
        _number(radio["rate_bps"], "radio.rate_bps", minimum=123, maximum=256000)
    if "channel_mhz" in radio:
        _number(radio["channel_mhz"], "radio.channel_mhz", minimum=240, maximum=930)

    mac = doc.get("mac", {})
    _expect(isinstance(mac, dict), "mac", "expected an object")
    if "mode" in mac:
        _string(mac["mode"], "mac.mode", choices={"selforg", "naive"})

    known_kinds = set(KindRegistry().names())
    seen_ids = set()
    for i, dev in enumerate(doc.get("devices", [])):
        path = f"devices[{i}]"
        _expect(isinstance(dev, dict), path, "expected an object")
        _expect("id" in dev, path, "missing required field 'id'")
        _number(dev["id"], f"{path}.id", minimum=0)
        _expect(dev["id"] not in seen_ids, f"{path}.id", f"duplicate device id {dev['id']}")
        seen_ids.add(dev["id"])
        _expect("kind" in dev, path, "missing required field 'kind'")
        _string(dev["kind"], f"{path}.kind", choices=known_kinds)
        if "position" in dev:
            _position(dev["position"], f"{path}.position")
        for key in ("report_interval_s", "poll_interval_s", "join_at_s"):
            if key in dev:
                _number(dev[key], f"{path}.{key}", minimum=0)
        if "send_times_s" in dev:
            _expect(isinstance(dev["send_times_s"], list), f"{path}.send_times_s",
                    "expected a list of times")
            for j, t in enumerate(dev["send_times_s"]):
                _number(t, f"{path}.send_times_s[{j}]", minimum=0)

    seen_users = set()
    for i, user in enumerate(doc.get("users", [])):
        path = f"users[{i}]"
        _expect(isinstance(user, dict), path, "expected an object")
        _expect("name" in user, path, "missing required field 'name'")
        _string(user["name"], f"{path}.name")
        _expect(user["name"] not in seen_users, f"{path}.name", "duplicate user")
        seen_users.add(user["name"])
        if "nat" in user:
            _string(user["nat"], f"{path}.nat", choices=NAT_NAMES)
        if "subscribe" in user:
            sub = user["subscribe"]
            ok = sub == "push" or (isinstance(sub, dict) and "poll_s" in sub)
            _expect(ok, f"{path}.subscribe", 'expected "push" or {"poll_s": seconds}')

    for i, cam in enumerate(doc.get("cameras", [])):
        path = f"cameras[{i}]"
        _expect(isinstance(cam, dict) and "id" in cam, path, "expected an object with 'id'")
        if "nat" in cam:
            _string(cam["nat"], f"{path}.nat", choices=NAT_NAMES)

    workload = doc.get("workload", {})
    _expect(isinstance(workload, dict), "workload", "expected an object")
    for i, cmd in enumerate(workload.get("commands", [])):
        path = f"workload.commands[{i}]"
        _expect(isinstance(cmd, dict), path, "expected an object")
        for key in ("at_s", "user", "device"):
            _expect(key in cmd, path, f"missing required field '{key}'")
        _number(cmd["at_s"], f"{path}.at_s", minimum=0)
        _expect(cmd["device"] in seen_ids, f"{path}.device",
                f"unknown device id {cmd['device']}")
        _expect(cmd["user"] in seen_users, f"{path}.user",
                f"unknown user {cmd['user']!r}")
    for i, ev in enumerate(workload.get("env", [])):
        path = f"workload.env[{i}]"
        _expect(isinstance(ev, dict), path, "expected an object")
        for key in ("at_s", "device", "sample"):
            _expect(key in ev, path, f"missing required field '{key}'")
        _expect(ev["device"] in seen_ids, f"{path}.device",
                f"unknown device id {ev['device']}")
        _expect(isinstance(ev["sample"], dict), f"{path}.sample", "expected an object")
    rc = workload.get("random_commands")
    if rc is not None:
        _expect(isinstance(rc, dict), "workload.random_commands", "expected an object")
        _number(rc.get("count", 0), "workload.random_commands.count", minimum=0)
        _expect(rc.get("users"), "workload.random_commands.users",
                "needs at least one user")

    synth = doc.get("synthetic_sessions")
    if synth is not None:
        _expect(isinstance(synth, dict), "synthetic_sessions", "expected an object")
        _number(synth.get("count", 0), "synthetic_sessions.count", minimum=0)
        _number(synth.get("heartbeat_s", 30), "synthetic_sessions.heartbeat_s",
                minimum=1)

    faults = doc.get("faults", {})
    _expect(isinstance(faults, dict), "faults", "expected an object")
    for name in ("rf_loss", "wan_loss"):
        for i, w in enumerate(faults.get(name, [])):
            path = f"faults.{name}[{i}]"
            _expect(isinstance(w, dict), path, "expected an object")
            _number(w.get("from_s", 0), f"{path}.from_s", minimum=0)
            _number(w.get("to_s", 0), f"{path}.to_s", minimum=0)
            _number(w.get("prob", 0), f"{path}.prob", minimum=0, maximum=1)
    if "wan_duplicate_prob" in faults:
        _number(faults["wan_duplicate_prob"], "faults.wan_duplicate_prob",
                minimum=0, maximum=1)
    for i, w in enumerate(faults.get("user_offline", [])):
        path = f"faults.user_offline[{i}]"
        _expect(isinstance(w, dict) and "user" in w, path, "expected an object with 'user'")
        _expect(w["user"] in seen_users, f"{path}.user", f"unknown user {w['user']!r}")

    return doc


def load_scenario(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"$: invalid JSON at line {exc.lineno}: {exc.msg}")
    return validate_scenario(doc)


def _tlv_from_action(action, kind) -> bytes:
    if isinstance(action, str):
        return bytes.fromhex(action)
    if isinstance(action, dict):
        if "set" in action:
            return encode_tlv(SET_ACTUATOR, bytes(action["set"]))
        if action.get("query"):
            return encode_tlv(QUERY_STATE, b"")
    raise ScenarioError(f"workload.commands: unintelligible action {action!r}")


def build_world(doc: dict, *, seed: int | None = None) -> World:
    """Materialize a validated scenario document."""
    radio_cfg = doc.get("radio", {})
    radio = RadioProfile(
        tx_power_dBm=radio_cfg.get("tx_power_dbm", 0.0),
        rate_bps=radio_cfg.get("rate_bps", 256_000.0),
        channel_center_MHz=radio_cfg.get("channel_mhz", 433.0),
    )
    mac_cfg = doc.get("mac", {})
    gw_cfg = doc.get("gateway", {})
    world = World(
        seed=seed if seed is not None else doc.get("seed", 0),
        env_kind=doc.get("environment", {}).get("kind", "indoor"),
        env_exponent=doc.get("environment", {}).get("path_loss_exponent"),
        radio=radio,
        mac_mode=mac_cfg.get("mode", "selforg"),
        static_addressing=mac_cfg.get("static_addressing", False),
        hop_latency_ms=doc.get("wan", {}).get("hop_latency_ms", 20.0),
        p2p_latency_ms=doc.get("wan", {}).get("p2p_latency_ms", 10.0),
        gateway_nat=gw_cfg.get("nat", "port_restricted"),
        gateway_secret=gw_cfg.get("secret", "gw-secret"),
        gateway_position=tuple(gw_cfg.get("position", (0.0, 0.0))),
    )
    world.scenario = doc

    for i, dev in enumerate(doc.get("devices", [])):
        handle = world.add_device(
            dev["kind"], dev["id"],
            position=tuple(dev.get("position", (3.0, 0.0))),
            mains=dev.get("mains", False),
            report_interval_s=dev.get("report_interval_s",
                                      DEVICE_DEFAULTS["report_interval_s"]),
            poll_interval_s=dev.get("poll_interval_s",
                                    DEVICE_DEFAULTS["poll_interval_s"]),
            armed=dev.get("armed", False),
            report_pad_to=dev.get("report_pad_to", 32),
            thresholds=dev.get("thresholds"),
            gts_slots=dev.get("gts_slots", 0),
            join_at_s=dev.get("join_at_s", 0.05 * (i + 1)),
            label=dev.get("label", ""),
        )
        for t in dev.get("send_times_s", []):
            world.sim.schedule_at(us_from_s(t),
                                  lambda h=handle: h.terminal.report_now())

    for user in doc.get("users", []):
        client = world.add_user(user["name"], secret=user.get("secret", "pw"),
                                nat=user.get("nat", "full_cone"),
                                admin=user.get("admin", False))
        login_at = us_from_s(user.get("login_at_s", 0.0))

        def do_login(client=client, user=user):
            def after_auth(token, err, client=client, user=user):
                if err is not None:
                    return
                sub = user.get("subscribe")
                if sub == "push":
                    client.subscribe_alarms("push")
                elif isinstance(sub, dict):
                    client.subscribe_alarms("poll", poll_interval_s=sub["poll_s"])

            client.login(gateway_secret=user.get("secret", "pw"), done=after_auth)

        world.sim.schedule_at(max(login_at, world.sim.now), do_login)

    for cam in doc.get("cameras", []):
        world.add_camera(cam["id"], nat=cam.get("nat", "open"))

    workload = doc.get("workload", {})
    for cmd in workload.get("commands", []):
        def run_cmd(cmd=cmd):
            client = world.clients[cmd["user"]]
            addr = world.coordinator.registry.by_device_id.get(cmd["device"])
            if addr is None:
                world.sim.emit(cmd["user"], "client.cmd_skip", device=cmd["device"])
                return
            kind = world.devices[cmd["device"]].spec.kind
            client.send_command(addr, _tlv_from_action(cmd.get("action", {"query": True}), kind))
        world.sim.schedule_at(us_from_s(cmd["at_s"]), run_cmd)

    rc = workload.get("random_commands")
    if rc:
        rng = world.sim.rng.fork()
        device_ids = [d["id"] for d in doc.get("devices", [])]
        from_us = us_from_s(rc.get("from_s", 1.0))
        to_us = us_from_s(rc.get("to_s", doc.get("duration_s", 60.0)))
        for _ in range(int(rc["count"])):
            at = rng.draw_range(from_us, to_us)
            user = rc["users"][rng.draw_range(0, len(rc["users"]) - 1)]
            device_id = device_ids[rng.draw_range(0, len(device_ids) - 1)]

            def run_random(user=user, device_id=device_id):
                client = world.clients[user]
                addr = world.coordinator.registry.by_device_id.get(device_id)
                if addr is None:
                    return
                kind = world.devices[device_id].spec.kind
                if kind.actuator:
                    tlv = encode_tlv(SET_ACTUATOR, b"\x01")
                else:
                    tlv = encode_tlv(QUERY_STATE, b"")
                client.send_command(addr, tlv)

            world.sim.schedule_at(at, run_random)

    for ev in workload.get("env", []):
        def run_env(ev=ev):
            world.devices[ev["device"]].terminal.on_env(ev["sample"])
        world.sim.schedule_at(us_from_s(ev["at_s"]), run_env)

    for chat in workload.get("chats", []):
        def run_chat(chat=chat):
            world.rendezvous.add_contact(chat["frm"], chat["to"])
            world.rendezvous.add_contact(chat["to"], chat["frm"])
            world.rendezvous.send_chat(chat["frm"], chat["to"], chat.get("text", ""))
        world.sim.schedule_at(us_from_s(chat["at_s"]), run_chat)

    for op in workload.get("camera", []):
        def run_cam(op=op):
            client = world.clients[op["user"]]
            if op["op"] == "start_stream":
                client.start_watching(op["camera"], op.get("quality", "low"))
            elif op["op"] == "control":
                client.camera_control(op["camera"], op.get("action", "rotate"),
                                      op.get("magnitude_deg", 0.0))
        world.sim.schedule_at(us_from_s(op["at_s"]), run_cam)

    synth = doc.get("synthetic_sessions")
    if synth:
        count = int(synth.get("count", 0))
        beat_us = us_from_s(synth.get("heartbeat_s", 30))
        nats = list(NatType)
        for i in range(count):
            name = f"synth{i}"
            world.rendezvous.register_user(name, "hb")
            world.rendezvous.login(name, "hb",
                                   NatProfile(nats[i % len(nats)]), lambda e: None)

        def beat_all():
            for i in range(count):
                if world.rendezvous.presence(f"synth{i}") == "online":
                    world.rendezvous.heartbeat(f"synth{i}")
            world.sim.schedule_in(beat_us, beat_all)

        world.sim.schedule_in(beat_us, beat_all)

    faults = doc.get("faults", {})
    for w in faults.get("rf_loss", []):
        world.medium.loss_windows.append(LossWindow(
            us_from_s(w["from_s"]), us_from_s(w["to_s"]), w["prob"]))
    for w in faults.get("wan_loss", []):
        world.fabric.loss_windows.append(WanLossWindow(
            us_from_s(w["from_s"]), us_from_s(w["to_s"]), w["prob"]))
    world.fabric.duplicate_prob = faults.get("wan_duplicate_prob", 0.0)
    for w in faults.get("user_offline", []):
        def go_offline(w=w):
            world.clients[w["user"]].logout()

        def back_online(w=w):
            world.clients[w["user"]].relogin()
        world.sim.schedule_at(us_from_s(w["from_s"]), go_offline)
        world.sim.schedule_at(us_from_s(w["to_s"]), back_online)

    # poll-mode subscribers drain once more right before the end of the run
    duration = doc.get("duration_s", 0)
    if duration:
        def final_drain():
            for client in world.clients.values():
                if client.token is not None:
                    client.poll_now()
        world.sim.schedule_at(us_from_s(duration) - 50_000, final_drain)

    return world


def run_scenario(doc: dict, *, seed: int | None = None) -> World:
    world = build_world(doc, seed=seed)
    world.run_until_s(doc.get("duration_s", 60.0))
    return world
