"""User-side API: login, inventory, commands, alarm inbox, camera viewing.

The client is the programmatic phone app.  It authenticates to the
rendezvous for transport and to the gateway for control, signs every
gateway-bound envelope with its session key, and keeps an append-only alarm
inbox de-duplicated by alarm id (push and poll modes may overlap).  Poll
mode batches queued envelopes into one fetch per interval, which is the
measurable low-power contract: fewer envelopes on the wire than push.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .camera import StreamReceiver
from .kernel import Simulator, us_from_s
from .nat import NatProfile
from .rendezvous import Rendezvous, SERVER
from .wan import (
    EnvelopeKind,
    WanEnvelope,
    WanFabric,
    derive_session_key,
    sign_envelope,
)


class GatewayUnreachable(Exception):
    pass


class AlarmInbox:
    def __init__(self):
        self.entries: list[dict] = []
        self._ids: set[str] = set()

    def add(self, entry: dict) -> bool:
        alarm_id = entry.get("alarm_id")
        if alarm_id in self._ids:
            return False
        self._ids.add(alarm_id)
        self.entries.append({**entry, "acknowledged": False})
        return True

    def acknowledge(self, alarm_id: str) -> None:
        for entry in self.entries:
            if entry["alarm_id"] == alarm_id:
                entry["acknowledged"] = True

    def __len__(self) -> int:
        return len(self.entries)


class Client:
    def __init__(self, sim: Simulator, rendezvous: Rendezvous, fabric: WanFabric,
                 name: str, secret: str, nat: NatProfile):
        self.sim = sim
        self.rendezvous = rendezvous
        self.fabric = fabric
        self.name = name
        self.secret = secret
        self.nat = nat
        self.gateway = "gateway"
        self.token: str | None = None
        self.key: bytes | None = None
        self.inbox = AlarmInbox()
        self.chats: list[dict] = []
        self.receivers: dict[int, StreamReceiver] = {}
        self.envelopes_sent = 0
        self.envelopes_received = 0
        self.command_latencies_us: list[int] = []
        self._pending: dict[str, tuple[int, object]] = {}
        self._counter = 0
        self._gw_secret = ""
        self._auth_done = None
        self._poll_timer = None
        self._beat_timer = None

    # -- session -----------------------------------------------------------------

    def login(self, *, gateway: str = "gateway", gateway_secret: str = "",
              done=None) -> None:
        """Bind to the rendezvous and authenticate to the home gateway."""
        self.gateway = gateway
        self._gw_secret = gateway_secret
        self.rendezvous.login(self.name, self.secret, self.nat, self._receive)
        self._heartbeat_loop()
        if self.rendezvous.presence(gateway) != "online":
            raise GatewayUnreachable(f"gateway {gateway!r} is offline")
        self._auth_done = done
        self._send(WanEnvelope(msg_id=self._next_id(), kind=EnvelopeKind.AUTH,
                               frm=self.name, to=gateway,
                               payload={"user": self.name, "secret": gateway_secret}))

    def logout(self) -> None:
        self.rendezvous.logout(self.name)
        if self._poll_timer is not None:
            self.sim.cancel(self._poll_timer)
            self._poll_timer = None
        if self._beat_timer is not None:
            self.sim.cancel(self._beat_timer)
            self._beat_timer = None

    def relogin(self) -> None:
        """Come back online; queued envelopes flush on login."""
        self.rendezvous.login(self.name, self.secret, self.nat, self._receive)
        self._heartbeat_loop()

    def _heartbeat_loop(self) -> None:
        if self._beat_timer is not None:
            self.sim.cancel(self._beat_timer)

        def beat():
            if self.rendezvous.presence(self.name) == "online":
                self.heartbeat()
            self._beat_timer = self.sim.schedule_in(30_000_000, beat)

        self._beat_timer = self.sim.schedule_in(30_000_000, beat)

    def _next_id(self) -> str:
        self._counter += 1
        return f"{self.name}:{self._counter}"

    _NO_REPLY = object()

    def _send(self, env: WanEnvelope, *, record_callback=_NO_REPLY) -> None:
        if record_callback is not Client._NO_REPLY:
            self._pending[env.msg_id] = (self.sim.now, record_callback)
        if self.key is not None and env.kind in (EnvelopeKind.CMD, EnvelopeKind.ADMIN):
            env.payload.setdefault("token", self.token)
            sign_envelope(env, self.key)
        self.envelopes_sent += 1
        self.fabric.deliver(self.rendezvous.on_envelope, env)

    # -- incoming ------------------------------------------------------------------

    def _receive(self, env: WanEnvelope) -> None:
        self.envelopes_received += 1
        if env.kind == EnvelopeKind.AUTH:
            self._on_auth_reply(env)
        elif env.kind == EnvelopeKind.CMD_ACK:
            self._on_cmd_ack(env)
        elif env.kind == EnvelopeKind.ALARM:
            self._on_alarm(env.payload)
        elif env.kind == EnvelopeKind.ADMIN:
            self._on_admin_reply(env)
        elif env.kind == EnvelopeKind.CHAT:
            self.chats.append({"frm": env.frm, "text": env.payload.get("text", ""),
                               "t": self.sim.now})
        elif env.kind == EnvelopeKind.CAM_DATA:
            self._on_chunk(env)
        elif env.kind == EnvelopeKind.CAM_CTRL:
            self._on_admin_reply(env)

    def _on_auth_reply(self, env: WanEnvelope) -> None:
        if env.payload.get("error"):
            if self._auth_done is not None:
                self._auth_done(None, env.payload)
            return
        self.token = env.payload["token"]
        self.key = derive_session_key(self.name, self._gw_secret,
                                      env.payload["counter"])
        self.sim.emit(self.name, "client.auth", token=self.token)
        if self._auth_done is not None:
            self._auth_done(self.token, None)

    def _on_cmd_ack(self, env: WanEnvelope) -> None:
        about = env.payload.get("about", "")
        pending = self._pending.pop(about, None)
        if pending is None:
            return
        t0, done = pending
        latency = self.sim.now - t0
        status = env.payload.get("status", "error")
        if status == "ok":
            self.command_latencies_us.append(latency)
        self.sim.emit(self.name, "client.cmd_ack", msg_id=about,
                      latency_us=latency, status=status,
                      error=env.payload.get("error", ""))
        if done is not None:
            done(env.payload, latency)

    def _on_admin_reply(self, env: WanEnvelope) -> None:
        about = env.payload.get("about", "")
        pending = self._pending.pop(about, None)
        if pending is None:
            return
        _, done = pending
        if env.payload.get("op") == "queued_batch":
            self._ingest_batch(env.payload.get("batch", []))
        if done is not None:
            done(env.payload, self.sim.now - pending[0])

    def _on_alarm(self, payload: dict) -> None:
        if self.inbox.add(payload):
            self.sim.emit(self.name, "client.inbox",
                          alarm_id=payload.get("alarm_id", ""),
                          addr=payload.get("addr"))

    def _ingest_batch(self, batch: list) -> None:
        for obj in batch:
            env = WanEnvelope.from_dict(obj)
            if env.kind == EnvelopeKind.ALARM:
                self._on_alarm(env.payload)
            elif env.kind == EnvelopeKind.CHAT:
                self.chats.append({"frm": env.frm,
                                   "text": env.payload.get("text", ""),
                                   "t": self.sim.now})

    def _on_chunk(self, env: WanEnvelope) -> None:
        stream_id = env.payload.get("stream_id")
        receiver = self.receivers.get(stream_id)
        if receiver is not None:
            receiver.on_envelope(env)

    # -- commands --------------------------------------------------------------------

    def send_command(self, addr: int, tlv: bytes, done=None) -> str:
        """Submit a device command; resolves with exactly one ack or error."""
        env = WanEnvelope(msg_id=self._next_id(), kind=EnvelopeKind.CMD,
                          frm=self.name, to=self.gateway,
                          payload={"addr": addr, "tlv": tlv.hex()})
        self.sim.emit(self.name, "client.cmd_submit", msg_id=env.msg_id, addr=addr)
        self._send(env, record_callback=done)
        return env.msg_id

    def admin(self, op: str, params: dict | None = None, done=None) -> str:
        payload = {"op": op}
        payload.update(params or {})
        env = WanEnvelope(msg_id=self._next_id(), kind=EnvelopeKind.ADMIN,
                          frm=self.name, to=self.gateway, payload=payload)
        self._send(env, record_callback=done)
        return env.msg_id

    def list_devices(self, done) -> None:
        self.admin("list_devices", done=lambda payload, _:
                   done(payload.get("devices", []), payload.get("error")))

    # -- alarms ---------------------------------------------------------------------

    def subscribe_alarms(self, mode: str = "push", poll_interval_s: float = 60.0,
                         done=None) -> None:
        self.sim.emit(self.name, "meta.subscribe", mode=mode)
        self.admin("subscribe", {"mode": mode}, done=done)
        if mode == "poll":
            self._poll_loop(us_from_s(poll_interval_s))

    def _poll_loop(self, interval_us: int) -> None:
        self._poll_timer = self.sim.schedule_in(interval_us,
                                                lambda: self._poll_tick(interval_us))

    def _poll_tick(self, interval_us: int) -> None:
        self.poll_now()
        self._poll_loop(interval_us)

    def poll_now(self, done=None) -> None:
        env = WanEnvelope(msg_id=self._next_id(), kind=EnvelopeKind.ADMIN,
                          frm=self.name, to=SERVER, payload={"op": "fetch_queued"})
        self._send(env, record_callback=done)

    def heartbeat(self) -> None:
        self._send(WanEnvelope(msg_id=self._next_id(), kind=EnvelopeKind.ADMIN,
                               frm=self.name, to=SERVER,
                               payload={"op": "heartbeat"}))

    # -- chat --------------------------------------------------------------------------

    def add_contact(self, other: str) -> bool:
        return self.rendezvous.add_contact(self.name, other)

    def send_chat(self, to: str, text: str):
        return self.rendezvous.send_chat(self.name, to, text)

    # -- camera ---------------------------------------------------------------------------

    def camera_control(self, camera_id: str, action: str, magnitude_deg: float,
                       done=None) -> str:
        env = WanEnvelope(msg_id=self._next_id(), kind=EnvelopeKind.CAM_CTRL,
                          frm=self.name, to=f"cam:{camera_id}",
                          payload={"op": "control", "action": action,
                                   "magnitude_deg": magnitude_deg})
        self.sim.emit(self.name, "client.cam_ctrl", camera=camera_id, action=action)
        self._send(env, record_callback=done)
        return env.msg_id

    def start_watching(self, camera_id: str, quality: str = "low", done=None) -> None:
        def on_reply(payload, _):
            stream_id = payload.get("stream_id")
            if stream_id is not None:
                receiver = StreamReceiver(self.sim, self.name, stream_id)
                self.receivers[stream_id] = receiver
                if done is not None:
                    done(receiver, payload)
            elif done is not None:
                done(None, payload)

        env = WanEnvelope(msg_id=self._next_id(), kind=EnvelopeKind.CAM_CTRL,
                          frm=self.name, to=f"cam:{camera_id}",
                          payload={"op": "start_stream", "quality": quality})
        self._send(env, record_callback=on_reply)

    def stop_watching(self, camera_id: str, stream_id: int, done=None) -> None:
        env = WanEnvelope(msg_id=self._next_id(), kind=EnvelopeKind.CAM_CTRL,
                          frm=self.name, to=f"cam:{camera_id}",
                          payload={"op": "stop_stream", "stream_id": stream_id})
        self._send(env, record_callback=done)
