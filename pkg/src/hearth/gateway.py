"""Home gateway: authenticated WAN sessions bridged onto the RF star.

The gateway logs into the rendezvous like any principal.  Client CMD
envelopes are verified (session token + HMAC tag), translated into RF
frames without touching the TLV bytes, and answered with exactly one
CMD_ACK or error each: device command-acks resolve the oldest pending
command per address, MAC delivery failures and the 5s timeout resolve the
rest.  Alarms fan out once per subscriber, queued server-side for offline
or poll-delivery users.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from . import devices as dev
from .kernel import Simulator
from .nat import NatProfile, NatType
from .network import BusyError, Coordinator, UnknownDeviceError
from .rendezvous import Rendezvous, SERVER
from .wan import (
    EnvelopeKind,
    WanEnvelope,
    WanFabric,
    derive_session_key,
    sign_envelope,
    verify_envelope,
)

CMD_TIMEOUT_US = 5_000_000

CONFIG_KEYS = ("wifi_enabled", "ssid", "pppoe_user", "pppoe_secret", "wan_mode")


class GatewayError(Exception):
    pass


class AuthFailed(GatewayError):
    pass


class IntegrityError(GatewayError):
    pass


class Forbidden(GatewayError):
    pass


class BadKey(GatewayError):
    pass


@dataclass
class RouterConfig:
    wifi_enabled: bool = True
    ssid: str = "hearth-home"
    pppoe_user: str = ""
    pppoe_secret: str = ""
    wan_mode: str = "dhcp"
    version: int = 0

    def redacted(self) -> dict:
        return {
            "wifi_enabled": self.wifi_enabled,
            "ssid": self.ssid,
            "pppoe_user": self.pppoe_user,
            "pppoe_secret": "***" if self.pppoe_secret else "",
            "wan_mode": self.wan_mode,
            "version": self.version,
        }


@dataclass
class GwSession:
    token: str
    user: str
    key: bytes
    admin: bool
    expires_at: int


@dataclass
class _PendingCmd:
    msg_id: str
    client: str
    addr: int
    submitted: int
    timer: object = None
    ticket: object = None
    resolved: bool = False


class Gateway:
    def __init__(self, sim: Simulator, coordinator: Coordinator,
                 rendezvous: Rendezvous, fabric: WanFabric, *,
                 principal: str = "gateway", secret: str = "gw-secret",
                 nat: NatProfile | None = None, users: dict | None = None,
                 session_ttl_us: int = 8 * 3600 * 1_000_000,
                 cmd_timeout_us: int = CMD_TIMEOUT_US):
        self.sim = sim
        self.coordinator = coordinator
        self.rendezvous = rendezvous
        self.fabric = fabric
        self.principal = principal
        self.users = users or {}
        self.session_ttl_us = session_ttl_us
        self.cmd_timeout_us = cmd_timeout_us
        self.config = RouterConfig()
        self.sessions: dict[str, GwSession] = {}
        self.pending: dict[str, _PendingCmd] = {}
        self.addr_fifo: dict[int, deque] = {}
        self.subscribers: dict[str, str] = {}  # user -> "push" | "poll"
        self.device_meta: dict[int, dict] = {}  # device_id -> {kind, label}
        self.state_cache: dict[int, dict] = {}  # addr -> snapshot
        self.alarm_log: list[dict] = []
        self.cameras: dict[str, object] = {}
        self.event_bus: list = []
        self._seen_cmds: set[str] = set()
        self._counter = 0
        self._auth_counter = 0
        coordinator.on_upstream = self._on_rf_upstream
        if principal not in rendezvous.users:
            rendezvous.register_user(principal, secret)
        rendezvous.login(principal, secret,
                         nat or NatProfile(NatType.PORT_RESTRICTED), self._receive)
        self._heartbeat()

    def _heartbeat(self) -> None:
        if self.rendezvous.presence(self.principal) == "online":
            self.rendezvous.heartbeat(self.principal)
        self.sim.schedule_in(30_000_000, self._heartbeat)

    # -- outgoing -----------------------------------------------------------------

    def _next_id(self) -> str:
        self._counter += 1
        return f"{self.principal}:{self._counter}"

    def _send(self, env: WanEnvelope) -> None:
        self.fabric.deliver(self.rendezvous.on_envelope, env)

    def _reply(self, to: str, kind: EnvelopeKind, payload: dict) -> None:
        env = WanEnvelope(msg_id=self._next_id(), kind=kind, frm=self.principal,
                          to=to, payload=payload)
        self._send(env)

    def post_event(self, kind: str, payload: dict) -> None:
        event = {"t": self.sim.now, "kind": kind, "payload": payload}
        for fn in self.event_bus:
            fn(event)

    # -- device metadata (wired by the scenario builder) -----------------------------

    def register_device_meta(self, device_id: int, kind_name: str, label: str = "") -> None:
        self.device_meta[device_id] = {"kind": kind_name, "label": label or kind_name}

    def register_camera(self, camera) -> None:
        self.cameras[camera.camera_id] = camera

    def _meta_for_addr(self, addr: int) -> dict:
        entry = self.coordinator.registry.slaves.get(addr)
        if entry is None:
            return {"kind": "unknown", "label": "unknown"}
        return self.device_meta.get(entry.device_id,
                                    {"kind": "unknown", "label": "unknown"})

    # -- authentication ---------------------------------------------------------------

    def authenticate(self, user: str, secret: str) -> tuple[str, int]:
        known = self.users.get(user)
        if known is None or known.get("secret") != secret:
            self.sim.emit(self.principal, "gw.auth", user=user, ok=False)
            raise AuthFailed(f"bad gateway credentials for {user!r}")
        self._auth_counter += 1
        token = f"gt-{user}-{self._auth_counter}"
        key = derive_session_key(user, secret, self._auth_counter)
        self.sessions[token] = GwSession(
            token=token, user=user, key=key, admin=bool(known.get("admin")),
            expires_at=self.sim.now + self.session_ttl_us)
        self.sim.emit(self.principal, "gw.auth", user=user, ok=True)
        return token, self._auth_counter

    def _session_for(self, env: WanEnvelope) -> GwSession:
        token = env.payload.get("token", "")
        session = self.sessions.get(token)
        if session is None:
            raise AuthFailed("unknown session token; re-authenticate")
        if self.sim.now >= session.expires_at:
            raise AuthFailed("session expired; re-authenticate")
        if not verify_envelope(env, session.key):
            self.sim.emit(self.principal, "gw.integrity_reject", msg_id=env.msg_id)
            raise IntegrityError("envelope failed integrity verification")
        return session

    # -- envelope dispatch ---------------------------------------------------------------

    def _receive(self, env: WanEnvelope) -> None:
        if env.kind == EnvelopeKind.AUTH:
            self._handle_auth(env)
        elif env.kind == EnvelopeKind.CMD:
            self._handle_cmd(env)
        elif env.kind == EnvelopeKind.ADMIN:
            self._handle_admin(env)

    def _handle_auth(self, env: WanEnvelope) -> None:
        try:
            token, counter = self.authenticate(env.payload.get("user", ""),
                                               env.payload.get("secret", ""))
        except AuthFailed as exc:
            self._reply(env.frm, EnvelopeKind.AUTH,
                        {"about": env.msg_id, "error": "AuthFailed",
                         "hint": "reauth", "detail": str(exc)})
            return
        self._reply(env.frm, EnvelopeKind.AUTH,
                    {"about": env.msg_id, "token": token, "counter": counter})

    # -- commands ------------------------------------------------------------------------

    def _cmd_error(self, env: WanEnvelope, error: str) -> None:
        self.sim.emit(self.principal, "gw.cmd_error", msg_id=env.msg_id, error=error)
        self._reply(env.frm, EnvelopeKind.CMD_ACK,
                    {"about": env.msg_id, "status": "error", "error": error})

    def _handle_cmd(self, env: WanEnvelope) -> None:
        if env.msg_id in self._seen_cmds:
            return  # duplicate in transit; the first copy owns the outcome
        self._seen_cmds.add(env.msg_id)
        try:
            session = self._session_for(env)
        except AuthFailed:
            self._cmd_error(env, "AuthFailed")
            return
        except IntegrityError:
            self._cmd_error(env, "IntegrityError")
            return
        addr = env.payload.get("addr")
        if addr is None and "device_id" in env.payload:
            addr = self.coordinator.registry.by_device_id.get(env.payload["device_id"])
        try:
            tlv = bytes.fromhex(env.payload.get("tlv", ""))
        except ValueError:
            self._cmd_error(env, "DecodeError")
            return
        if addr is None or addr not in self.coordinator.registry.slaves:
            self._cmd_error(env, "UnknownDevice")
            return
        if not tlv or len(tlv) > 64:
            self._cmd_error(env, "DecodeError")
            return
        self.sim.emit(self.principal, "gw.cmd", msg_id=env.msg_id, addr=addr)
        pend = _PendingCmd(msg_id=env.msg_id, client=env.frm, addr=addr,
                           submitted=self.sim.now)
        self.pending[env.msg_id] = pend
        self.addr_fifo.setdefault(addr, deque()).append(env.msg_id)
        pend.timer = self.sim.schedule_in(self.cmd_timeout_us,
                                          lambda: self._resolve(pend, "error", error="Timeout"))

        def receipt(outcome):
            if not outcome.delivered:
                self._resolve(pend, "error", error="DeliveryFailed")

        try:
            pend.ticket = self.coordinator.route_downlink(addr, tlv, done=receipt)
        except UnknownDeviceError:
            self._resolve(pend, "error", error="UnknownDevice")
        except BusyError:
            self._resolve(pend, "error", error="Busy")

    def _resolve(self, pend: _PendingCmd, status: str, *, state: bytes = b"",
                 error: str = "") -> None:
        if pend.resolved:
            return
        pend.resolved = True
        if pend.timer is not None:
            self.sim.cancel(pend.timer)
        if pend.ticket is not None and status != "ok":
            pend.ticket.cancel()
        e2e = self.sim.now - pend.submitted
        payload = {"about": pend.msg_id, "status": status, "e2e_us": e2e}
        if status == "ok":
            payload["state"] = state.hex()
            payload["addr"] = pend.addr
            self.sim.emit(self.principal, "gw.cmd_ack", msg_id=pend.msg_id,
                          addr=pend.addr, e2e_us=e2e)
        else:
            payload["error"] = error
            self.sim.emit(self.principal, "gw.cmd_error", msg_id=pend.msg_id,
                          error=error)
        self._reply(pend.client, EnvelopeKind.CMD_ACK, payload)
        self.post_event("cmd_ack", {"msg_id": pend.msg_id, "addr": pend.addr,
                                    "status": status, "error": error or None})

    def _resolve_oldest_for_addr(self, addr: int, status: str, *, state: bytes = b"",
                                 error: str = "") -> None:
        fifo = self.addr_fifo.get(addr)
        if not fifo:
            return
        while fifo:
            msg_id = fifo[0]
            pend = self.pending.get(msg_id)
            if pend is None or pend.resolved:
                fifo.popleft()
                continue
            fifo.popleft()
            self._resolve(pend, status, state=state, error=error)
            return

    # -- RF upstream --------------------------------------------------------------------

    def _on_rf_upstream(self, addr: int, payload: bytes) -> None:
        try:
            tlv_type, value = dev.decode_tlv(payload)
        except dev.TlvError:
            self.sim.emit(self.principal, "gw.decode_error", addr=addr)
            return
        if tlv_type == dev.REPORT and value:
            self._on_report(addr, value)
        elif tlv_type == dev.ALARM and value:
            self._on_alarm(addr, value)

    def _update_state(self, addr: int, state: bytes) -> None:
        meta = self._meta_for_addr(addr)
        snapshot = {
            "addr": addr,
            "kind": meta["kind"],
            "label": meta["label"],
            "state": state.hex(),
            "decoded": dev_state_description(meta["kind"], state),
            "t": self.sim.now,
        }
        self.state_cache[addr] = snapshot
        self.post_event("device_state", snapshot)

    def _on_report(self, addr: int, value: bytes) -> None:
        reason, rest = value[0], value[1:]
        self.sim.emit(self.principal, "gw.report", addr=addr, reason=reason)
        if reason in (dev.REASON_CMD_ACK, dev.REASON_QUERY):
            self._update_state(addr, rest)
            self._resolve_oldest_for_addr(addr, "ok", state=rest)
        elif reason == dev.REASON_ERROR:
            code = rest[0] if rest else dev.ERR_DECODE
            error = "Unsupported" if code == dev.ERR_UNSUPPORTED else "DecodeError"
            if len(rest) > 1:
                self._update_state(addr, rest[1:])
            self._resolve_oldest_for_addr(addr, "error", error=error)
        else:  # periodic / query reply
            self._update_state(addr, rest)

    def _on_alarm(self, addr: int, value: bytes) -> None:
        code, data = value[0], value[1:]
        meta = self._meta_for_addr(addr)
        alarm_id = f"al-{len(self.alarm_log) + 1}"
        entry = {"alarm_id": alarm_id, "t": self.sim.now, "addr": addr,
                 "kind": meta["kind"], "label": meta["label"], "code": code,
                 "data": data.hex(), "acknowledged": False}
        self.alarm_log.append(entry)
        self.sim.emit(self.principal, "gw.alarm", alarm_id=alarm_id, addr=addr,
                      code=code)
        self.post_event("alarm", entry)
        for user, mode in self.subscribers.items():
            payload = dict(entry)
            if mode == "poll":
                payload["delivery"] = "poll"
            env = WanEnvelope(msg_id=self._next_id(), kind=EnvelopeKind.ALARM,
                              frm=self.principal, to=user, payload=payload)
            self.sim.emit(self.principal, "gw.alarm_push", alarm_id=alarm_id,
                          user=user, mode=mode)
            self._send(env)

    # -- admin ------------------------------------------------------------------------

    def _handle_admin(self, env: WanEnvelope) -> None:
        try:
            session = self._session_for(env)
        except AuthFailed as exc:
            self._reply(env.frm, EnvelopeKind.ADMIN,
                        {"about": env.msg_id, "error": "AuthFailed", "hint": "reauth",
                         "detail": str(exc)})
            return
        except IntegrityError:
            self._reply(env.frm, EnvelopeKind.ADMIN,
                        {"about": env.msg_id, "error": "IntegrityError"})
            return
        op = env.payload.get("op")
        try:
            result = self._admin_op(op, env.payload, session)
        except Forbidden:
            result = {"error": "Forbidden"}
        except BadKey as exc:
            result = {"error": "BadKey", "detail": str(exc)}
        result["about"] = env.msg_id
        result.setdefault("op", op)
        self._reply(env.frm, EnvelopeKind.ADMIN, result)

    def _admin_op(self, op: str, payload: dict, session: GwSession) -> dict:
        if op == "get_config":
            return {"config": self.config.redacted()}
        if op == "set_config":
            if not session.admin:
                raise Forbidden()
            key, value = payload.get("key"), payload.get("value")
            if key not in CONFIG_KEYS:
                raise BadKey(f"unknown config key {key!r}")
            setattr(self.config, key, value)
            self.config.version += 1
            self.sim.emit(self.principal, "gw.admin", key=key,
                          version=self.config.version)
            self.post_event("config", self.config.redacted())
            return {"config": self.config.redacted()}
        if op == "list_devices":
            return {"devices": self.list_devices()}
        if op == "subscribe":
            mode = payload.get("mode", "push")
            self.subscribers[session.user] = "poll" if mode == "poll" else "push"
            return {"subscribed": self.subscribers[session.user]}
        if op == "list_alarms":
            page = int(payload.get("page", 0))
            size = int(payload.get("page_size", 50))
            newest_first = list(reversed(self.alarm_log))
            return {"alarms": newest_first[page * size:(page + 1) * size],
                    "total": len(self.alarm_log)}
        if op == "ack_alarm":
            target = payload.get("alarm_id")
            for entry in self.alarm_log:
                if entry["alarm_id"] == target:
                    entry["acknowledged"] = True
                    self.post_event("alarm_ack", {"alarm_id": target})
                    return {"acknowledged": target}
            return {"error": "UnknownAlarm"}
        if op == "wifi_attach":
            ok = bool(self.config.wifi_enabled)
            self.sim.emit(self.principal, "gw.wifi_attach",
                          client=payload.get("client", ""), accepted=ok)
            return {"attached": ok}
        raise BadKey(f"unknown admin op {op!r}")

    # -- snapshots ----------------------------------------------------------------------

    def list_devices(self) -> list[dict]:
        out = []
        for addr in sorted(self.coordinator.registry.slaves):
            entry = self.coordinator.registry.slaves[addr]
            meta = self.device_meta.get(entry.device_id,
                                        {"kind": "unknown", "label": "unknown"})
            snapshot = self.state_cache.get(addr, {})
            out.append({
                "addr": addr,
                "device_id": entry.device_id,
                "kind": meta["kind"],
                "label": meta["label"],
                "sleepy": entry.sleepy,
                "state": snapshot.get("state", ""),
                "decoded": snapshot.get("decoded", {}),
            })
        for cam_id in sorted(self.cameras):
            cam = self.cameras[cam_id]
            out.append({
                "addr": None,
                "device_id": None,
                "camera_id": cam_id,
                "kind": "camera",
                "label": cam_id,
                "sleepy": False,
                "state": "",
                "decoded": {"pan_deg": cam.pan_deg, "tilt_deg": cam.tilt_deg},
            })
        return out


def dev_state_description(kind_name: str, state: bytes) -> dict:
    """Human-readable projection of a kind's state bytes (built-ins only)."""
    try:
        if kind_name in ("plug",):
            return {"on": bool(state[0])}
        if kind_name == "bulb":
            return {"on": bool(state[0]), "level": state[1]}
        if kind_name == "curtain":
            return {"position": state[0]}
        if kind_name == "door_contact":
            return {"open": bool(state[0])}
        if kind_name == "pir_motion":
            return {"motion": bool(state[0])}
        if kind_name == "vibration_touch":
            return {"triggered": bool(state[0])}
        if kind_name in ("gas", "smoke"):
            return {"tripped": bool(state[0]),
                    "level": int.from_bytes(state[1:3], "big")}
        if kind_name == "temp_humidity":
            return {"temp_c": int.from_bytes(state[0:2], "big", signed=True) / 100.0,
                    "humidity": int.from_bytes(state[2:4], "big") / 10.0}
        if kind_name == "pm25":
            return {"ug_m3": int.from_bytes(state[0:2], "big")}
        if kind_name == "ir_blaster":
            return {"last_code": state.hex()}
    except IndexError:
        pass
    return {"raw": state.hex()}
