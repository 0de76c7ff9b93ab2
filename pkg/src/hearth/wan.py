"""WAN envelopes and the in-simulation transport fabric.

Envelopes are the unit of client/server/gateway traffic.  Authenticated
sessions tag each envelope with an HMAC over its canonical bytes; any
in-flight modification breaks verification.  The fabric models per-hop
latency plus optional loss/duplication fault injection.
"""

from __future__ import annotations

import hashlib
import hmac
import json
from dataclasses import dataclass, field
from enum import Enum

from .kernel import Simulator


class EnvelopeKind(str, Enum):
    CMD = "CMD"
    CMD_ACK = "CMD_ACK"
    REPORT = "REPORT"
    ALARM = "ALARM"
    ADMIN = "ADMIN"
    CHAT = "CHAT"
    CAM_CTRL = "CAM_CTRL"
    CAM_DATA = "CAM_DATA"
    AUTH = "AUTH"


@dataclass
class WanEnvelope:
    msg_id: str
    kind: EnvelopeKind
    frm: str
    to: str
    payload: dict = field(default_factory=dict)
    path: str = "relay"
    tag: str | None = None

    def to_dict(self) -> dict:
        return {"msg_id": self.msg_id, "kind": self.kind.value, "frm": self.frm,
                "to": self.to, "payload": self.payload, "path": self.path,
                "tag": self.tag}

    @classmethod
    def from_dict(cls, obj: dict) -> "WanEnvelope":
        return cls(msg_id=obj["msg_id"], kind=EnvelopeKind(obj["kind"]),
                   frm=obj["frm"], to=obj["to"], payload=obj.get("payload", {}),
                   path=obj.get("path", "relay"), tag=obj.get("tag"))


def canonical_bytes(env: WanEnvelope) -> bytes:
    doc = {"msg_id": env.msg_id, "kind": env.kind.value, "frm": env.frm,
           "to": env.to, "payload": env.payload}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def sign_envelope(env: WanEnvelope, key: bytes) -> WanEnvelope:
    env.tag = hmac.new(key, canonical_bytes(env), hashlib.sha256).hexdigest()
    return env


def verify_envelope(env: WanEnvelope, key: bytes) -> bool:
    if env.tag is None:
        return False
    expect = hmac.new(key, canonical_bytes(env), hashlib.sha256).hexdigest()
    return hmac.compare_digest(env.tag, expect)


def derive_session_key(user: str, secret: str, counter: int) -> bytes:
    return hashlib.sha256(f"{user}:{secret}:{counter}".encode("utf-8")).digest()


def payload_size_bytes(env: WanEnvelope) -> int:
    """Metered size: an explicit size field wins (opaque camera payloads)."""
    size = env.payload.get("size")
    if isinstance(size, int):
        return size
    return len(json.dumps(env.payload, sort_keys=True, separators=(",", ":")))


@dataclass
class WanLossWindow:
    start_us: int
    end_us: int
    probability: float


class WanFabric:
    """Schedules envelope handoffs with latency, loss and duplication faults."""

    def __init__(self, sim: Simulator, *, hop_latency_us: int = 20_000,
                 p2p_latency_us: int = 10_000):
        self.sim = sim
        self.hop_latency_us = hop_latency_us
        self.p2p_latency_us = p2p_latency_us
        self.duplicate_prob = 0.0
        self.loss_windows: list[WanLossWindow] = []
        self._rng = sim.rng.fork()

    def _loss_probability(self) -> float:
        now = self.sim.now
        p = 0.0
        for w in self.loss_windows:
            if w.start_us <= now < w.end_us:
                p = max(p, w.probability)
        return p

    def deliver(self, receive, env: WanEnvelope, *, latency_us: int | None = None) -> None:
        latency = self.hop_latency_us if latency_us is None else latency_us
        p_loss = self._loss_probability()
        if p_loss > 0.0 and self._rng.chance(p_loss):
            self.sim.emit(env.frm, "wan.drop", msg_id=env.msg_id, env_kind=env.kind.value)
            return
        self.sim.schedule_in(latency, lambda: receive(env))
        if self.duplicate_prob > 0.0 and self._rng.chance(self.duplicate_prob):
            dup = WanEnvelope.from_dict(env.to_dict())
            self.sim.schedule_in(latency + 1000, lambda: receive(dup))
            self.sim.emit(env.frm, "wan.duplicate", msg_id=env.msg_id)


class P2pChannel:
    """Direct peer path established by a successful hole punch."""

    def __init__(self, sim: Simulator, fabric: WanFabric, end_a: str, end_b: str):
        self.sim = sim
        self.fabric = fabric
        self.ends = {end_a: None, end_b: None}  # principal -> receive fn
        self.bytes_by_end = {end_a: 0, end_b: 0}
        self.open = True

    def attach(self, principal: str, receive) -> None:
        if principal not in self.ends:
            raise ValueError(f"{principal} is not an end of this channel")
        self.ends[principal] = receive

    def peer_of(self, principal: str) -> str:
        for end in self.ends:
            if end != principal:
                return end
        raise ValueError(principal)

    def send(self, frm: str, env: WanEnvelope) -> None:
        if not self.open:
            return
        peer = self.peer_of(frm)
        receive = self.ends.get(peer)
        self.bytes_by_end[frm] += payload_size_bytes(env)
        env.path = "p2p"
        if receive is not None:
            self.fabric.deliver(receive, env, latency_us=self.fabric.p2p_latency_us)

    def close(self) -> None:
        self.open = False
