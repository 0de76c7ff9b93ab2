"""Rendezvous server: accounts, presence, roster/chat, relay, hole punching.

One logical server. Envelopes from online principals are relayed exactly
once, in per-sender order; envelopes for offline (or poll-delivery) users
wait in a bounded queue that drops oldest first.  Large transfers are
brokered to a direct peer channel when the NAT pair allows a hole punch;
relayed payload bytes are metered so the bypass is observable.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .kernel import Simulator
from .nat import NatProfile, NatType, PathChoice, decide_path, punch_succeeds
from .wan import EnvelopeKind, P2pChannel, WanEnvelope, WanFabric, payload_size_bytes

SERVER = "server"
OFFLINE_QUEUE_CAP = 256
DEDUP_WINDOW = 4096


class RendezvousError(Exception):
    pass


class Conflict(RendezvousError):
    pass


class AuthFailed(RendezvousError):
    pass


class UnknownPrincipal(RendezvousError):
    pass


class Forbidden(RendezvousError):
    pass


class PunchFailed(RendezvousError):
    pass


@dataclass
class Session:
    principal: str
    nat: NatProfile
    receive: object
    online: bool = True
    last_heartbeat: int = 0
    expiry_handle: object = None


class Rendezvous:
    def __init__(self, sim: Simulator, fabric: WanFabric, *,
                 session_timeout_us: int = 90_000_000,
                 queue_cap: int = OFFLINE_QUEUE_CAP):
        self.sim = sim
        self.fabric = fabric
        self.session_timeout_us = session_timeout_us
        self.queue_cap = queue_cap
        self.users: dict[str, str] = {}
        self.sessions: dict[str, Session] = {}
        self.queues: dict[str, deque] = {}
        self.contacts: dict[str, set] = {}
        self._seen: dict[str, object] = {}  # sender -> (set, deque)
        self.relayed_payload_bytes = 0
        self.setup_bytes = 0
        self.expired_sessions = 0
        self._counter = 0

    # -- accounts and presence -------------------------------------------------

    def register_user(self, name: str, secret: str) -> str:
        if name in self.users:
            raise Conflict(f"user {name!r} already registered")
        self.users[name] = secret
        self.contacts.setdefault(name, set())
        return name

    def login(self, name: str, secret: str, nat: NatProfile, receive) -> Session:
        if self.users.get(name) != secret:
            raise AuthFailed(f"bad credentials for {name!r}")
        session = Session(principal=name, nat=nat, receive=receive,
                          last_heartbeat=self.sim.now)
        self.sessions[name] = session
        self._arm_expiry(session)
        self.sim.emit(SERVER, "session.login", principal=name,
                      nat=nat.nat_type.value)
        self._flush_queue(name)
        return session

    def logout(self, name: str) -> None:
        session = self.sessions.pop(name, None)
        if session is not None:
            session.online = False
            if session.expiry_handle is not None:
                self.sim.cancel(session.expiry_handle)
            self.sim.emit(SERVER, "session.logout", principal=name)

    def heartbeat(self, name: str) -> None:
        session = self.sessions.get(name)
        if session is None:
            raise UnknownPrincipal(name)
        session.last_heartbeat = self.sim.now
        self._arm_expiry(session)

    def _arm_expiry(self, session: Session) -> None:
        if session.expiry_handle is not None:
            self.sim.cancel(session.expiry_handle)
        session.expiry_handle = self.sim.schedule_in(
            self.session_timeout_us, lambda: self._expire(session))

    def _expire(self, session: Session) -> None:
        if self.sessions.get(session.principal) is not session:
            return
        if self.sim.now - session.last_heartbeat < self.session_timeout_us:
            return
        session.online = False
        del self.sessions[session.principal]
        self.expired_sessions += 1
        self.sim.emit(SERVER, "session.expire", principal=session.principal)

    def presence(self, name: str) -> str:
        return "online" if name in self.sessions else "offline"

    # -- relay -------------------------------------------------------------------

    def _already_seen(self, env: WanEnvelope) -> bool:
        entry = self._seen.get(env.frm)
        if entry is None:
            entry = (set(), deque())
            self._seen[env.frm] = entry
        ids, order = entry
        if env.msg_id in ids:
            return True
        ids.add(env.msg_id)
        order.append(env.msg_id)
        if len(order) > DEDUP_WINDOW:
            ids.discard(order.popleft())
        return False

    def on_envelope(self, env: WanEnvelope) -> None:
        """Entry point for envelopes arriving over the fabric."""
        sender = self.sessions.get(env.frm)
        if sender is not None:
            # any traffic from a principal counts as liveness
            sender.last_heartbeat = self.sim.now
            self._arm_expiry(sender)
        if self._already_seen(env):
            self.sim.emit(SERVER, "relay.dedup", frm=env.frm, msg_id=env.msg_id)
            return
        if env.to == SERVER:
            self._server_op(env)
            return
        try:
            self.relay(env, _deduped=True)
        except UnknownPrincipal:
            reply = WanEnvelope(msg_id=self._next_id(), kind=EnvelopeKind.ADMIN,
                                frm=SERVER, to=env.frm,
                                payload={"error": "UnknownPrincipal",
                                         "about": env.msg_id})
            self._to_principal(env.frm, reply)

    def relay(self, env: WanEnvelope, *, _deduped: bool = False) -> None:
        if not _deduped and self._already_seen(env):
            self.sim.emit(SERVER, "relay.dedup", frm=env.frm, msg_id=env.msg_id)
            return
        known = env.to in self.users or env.to in self.sessions
        if not known:
            raise UnknownPrincipal(env.to)
        if env.payload.get("delivery") == "poll":
            self.enqueue_for(env.to, env)
            return
        session = self.sessions.get(env.to)
        if session is None:
            self.enqueue_for(env.to, env)
            return
        size = payload_size_bytes(env)
        self.relayed_payload_bytes += size
        env.path = "relay"
        self.sim.emit(SERVER, "relay.deliver", to=env.to, msg_id=env.msg_id,
                      env_kind=env.kind.value, bytes=size)
        self.fabric.deliver(session.receive, env)

    def enqueue_for(self, user: str, env: WanEnvelope) -> None:
        queue = self.queues.setdefault(user, deque())
        if len(queue) >= self.queue_cap:
            dropped = queue.popleft()
            self.sim.emit(SERVER, "relay.drop", to=user, msg_id=dropped.msg_id,
                          reason="queue_full")
        queue.append(env)
        self.sim.emit(SERVER, "relay.queue", to=user, msg_id=env.msg_id,
                      depth=len(queue))

    def fetch_queued(self, user: str) -> list[WanEnvelope]:
        queue = self.queues.get(user)
        if not queue:
            return []
        out = list(queue)
        queue.clear()
        return out

    def _flush_queue(self, name: str) -> None:
        session = self.sessions.get(name)
        queue = self.queues.get(name)
        if session is None or not queue:
            return
        while queue:
            env = queue.popleft()
            if env.payload.get("delivery") == "poll":
                # poll-delivery envelopes wait for an explicit fetch
                rest = deque([env])
                rest.extend(queue)
                self.queues[name] = rest
                return
            size = payload_size_bytes(env)
            self.relayed_payload_bytes += size
            self.sim.emit(SERVER, "relay.deliver", to=name, msg_id=env.msg_id,
                          env_kind=env.kind.value, bytes=size)
            self.fabric.deliver(session.receive, env)

    def _next_id(self) -> str:
        self._counter += 1
        return f"srv:{self._counter}"

    def _to_principal(self, name: str, env: WanEnvelope) -> None:
        session = self.sessions.get(name)
        if session is not None:
            self.fabric.deliver(session.receive, env)
        else:
            self.enqueue_for(name, env)

    def _server_op(self, env: WanEnvelope) -> None:
        op = env.payload.get("op")
        if op == "fetch_queued":
            batch = [e.to_dict() for e in self.fetch_queued(env.frm)]
            reply = WanEnvelope(msg_id=self._next_id(), kind=EnvelopeKind.ADMIN,
                                frm=SERVER, to=env.frm,
                                payload={"op": "queued_batch", "batch": batch,
                                         "about": env.msg_id})
            self._to_principal(env.frm, reply)
        elif op == "heartbeat":
            if env.frm in self.sessions:
                self.heartbeat(env.frm)

    # -- roster and chat -----------------------------------------------------------

    def add_contact(self, a: str, b: str) -> bool:
        """Record that `a` added `b`; returns True once the relation is mutual."""
        if a not in self.users or b not in self.users:
            raise UnknownPrincipal(b if a in self.users else a)
        self.contacts.setdefault(a, set()).add(b)
        mutual = a in self.contacts.get(b, set())
        self.sim.emit(SERVER, "roster.add", frm=a, to=b, mutual=mutual)
        return mutual

    def is_mutual(self, a: str, b: str) -> bool:
        return b in self.contacts.get(a, set()) and a in self.contacts.get(b, set())

    def roster_of(self, name: str) -> dict:
        return {"owner": name,
                "contacts": sorted(self.contacts.get(name, set())),
                "presence": {c: self.presence(c)
                             for c in sorted(self.contacts.get(name, set()))}}

    def send_chat(self, frm: str, to: str, text: str) -> WanEnvelope:
        if not self.is_mutual(frm, to):
            raise Forbidden(f"{frm} and {to} are not mutual contacts")
        self._counter += 1
        env = WanEnvelope(msg_id=f"chat:{frm}:{self._counter}", kind=EnvelopeKind.CHAT,
                          frm=frm, to=to, payload={"text": text})
        self.relay(env)
        return env

    # -- hole punching ----------------------------------------------------------------

    def broker_p2p(self, a: str, b: str) -> P2pChannel:
        sa = self.sessions.get(a)
        sb = self.sessions.get(b)
        if sa is None or sb is None:
            raise RendezvousError(f"both parties must be online to punch ({a}, {b})")
        # endpoint exchange: two small setup messages via the server
        self.setup_bytes += 128
        ok = punch_succeeds(sa.nat.nat_type, sb.nat.nat_type)
        self.sim.emit(SERVER, "p2p.punch", a=a, b=b,
                      nat_a=sa.nat.nat_type.value, nat_b=sb.nat.nat_type.value,
                      success=ok)
        if not ok:
            raise PunchFailed(f"hole punch failed for {sa.nat.nat_type.value}"
                              f"/{sb.nat.nat_type.value}")
        return P2pChannel(self.sim, self.fabric, a, b)
