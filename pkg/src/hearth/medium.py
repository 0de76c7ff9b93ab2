"""Shared radio medium: who hears what, and when frames collide.

Delivery rule: a receiver hears a frame iff received power (tx power minus
path loss) clears its sensitivity floor.  Any airtime overlap between two
audible frames at a receiver corrupts both (no capture effect).  Nodes are
half-duplex: a frame is lost at a receiver that transmitted or slept during
any part of it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .kernel import Simulator
from .radio import Environment, RadioProfile, airtime, path_loss


class UnknownNodeError(Exception):
    pass


@dataclass
class _NodeEntry:
    node_id: str
    position: tuple[float, float]
    profile: RadioProfile
    listener: object  # MacNode-compatible: is_listening(start,end), deliver(data, src, power)


@dataclass
class _Transmission:
    src: str
    start: int
    end: int
    data: bytes
    channel: float
    audible: dict = field(default_factory=dict)   # node_id -> rx power dBm
    corrupted: set = field(default_factory=set)   # node_ids with overlap damage


@dataclass
class LossWindow:
    start_us: int
    end_us: int
    probability: float


class Medium:
    def __init__(self, sim: Simulator, env: Environment, *, frame_loss_prob: float = 0.0):
        self.sim = sim
        self.env = env
        self.frame_loss_prob = frame_loss_prob
        self.loss_windows: list[LossWindow] = []
        self.nodes: dict[str, _NodeEntry] = {}
        self.active: list[_Transmission] = []
        self._loss_rng = sim.rng.fork()

    def register(self, node_id: str, position: tuple[float, float],
                 profile: RadioProfile, listener) -> None:
        self.nodes[node_id] = _NodeEntry(node_id, (float(position[0]), float(position[1])), profile, listener)

    def distance(self, a: str, b: str) -> float:
        pa, pb = self.nodes[a].position, self.nodes[b].position
        return math.hypot(pa[0] - pb[0], pa[1] - pb[1])

    def rx_power_dBm(self, src: str, dst: str) -> float:
        entry = self.nodes[src]
        d = max(self.distance(src, dst), 0.01)  # co-located nodes: treat as 1cm
        return entry.profile.tx_power_dBm - path_loss(d, self.env, entry.profile.channel_center_MHz)

    def _prune(self) -> None:
        now = self.sim.now
        self.active = [tx for tx in self.active if tx.end > now]

    def channel_busy(self, node_id: str) -> bool:
        """Carrier sense at `node_id` right now (own transmissions count as busy)."""
        if node_id not in self.nodes:
            raise UnknownNodeError(node_id)
        entry = self.nodes[node_id]
        self._prune()
        for tx in self.active:
            if tx.src == node_id:
                return True
            if tx.channel != entry.profile.channel_center_MHz:
                continue
            if self.rx_power_dBm(tx.src, node_id) >= entry.profile.sensitivity_dBm:
                return True
        return False

    def transmit(self, src: str, data: bytes) -> tuple[int, int]:
        """Put a frame on the air now. Returns (start, end) times."""
        if src not in self.nodes:
            raise UnknownNodeError(src)
        entry = self.nodes[src]
        start = self.sim.now
        end = start + airtime(len(data) * 8, entry.profile.rate_bps)
        tx = _Transmission(src=src, start=start, end=end, data=data,
                           channel=entry.profile.channel_center_MHz)
        self._prune()
        for other_id, other in self.nodes.items():
            if other_id == src or other.profile.channel_center_MHz != tx.channel:
                continue
            power = self.rx_power_dBm(src, other_id)
            if power >= other.profile.sensitivity_dBm:
                tx.audible[other_id] = power
        # Overlap with anything already on the air corrupts both frames at
        # every receiver that can hear both.
        for ongoing in self.active:
            if ongoing.channel != tx.channel:
                continue
            shared = tx.audible.keys() & ongoing.audible.keys()
            for rx in shared:
                tx.corrupted.add(rx)
                ongoing.corrupted.add(rx)
            # A transmitting node jams its own reception; handled by the
            # half-duplex listening check at delivery time.
        self.active.append(tx)
        self.sim.emit(src, "rf.tx", bytes=len(data), end=end)
        self.sim.schedule_at(end, lambda: self._complete(tx))
        return start, end

    def _loss_probability(self) -> float:
        p = self.frame_loss_prob
        now = self.sim.now
        for w in self.loss_windows:
            if w.start_us <= now < w.end_us:
                p = max(p, w.probability)
        return p

    def _complete(self, tx: _Transmission) -> None:
        for rx_id, power in tx.audible.items():
            entry = self.nodes.get(rx_id)
            if entry is None:
                continue
            listening = entry.listener.is_listening(tx.start, tx.end)
            if rx_id in tx.corrupted:
                if listening:
                    self.sim.emit(rx_id, "rf.collision", src=tx.src)
                continue
            if not listening:
                continue
            p_loss = self._loss_probability()
            if p_loss > 0.0 and self._loss_rng.chance(p_loss):
                self.sim.emit(rx_id, "rf.drop", src=tx.src, reason="injected")
                continue
            entry.listener.deliver(tx.data, tx.src, power)
