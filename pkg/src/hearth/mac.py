"""MAC state machines for the 433MHz control network.

Two access modes:

* ``selforg`` — listen-before-talk with exponential backoff, unicast DATA
  acknowledged within a timeout and retransmitted (same sequence number) up
  to a retry cap, superframe-aware so contention traffic never crosses into
  guaranteed slots.
* ``naive`` — the comparison baseline: transmit immediately, no carrier
  sense, no acknowledgment, no retry.

The first transmission attempt performs an immediate channel check and sends
right away on an idle channel; the random backoff window (initially 8 units
of 1ms, doubling per busy check or retry) applies only after a busy channel
or a lost acknowledgment.  Receivers de-duplicate (net, src, seq) within a
sliding window so retransmissions reach the upper layer at most once.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum

from .frame import (
    BROADCAST_ADDR,
    Frame,
    FrameError,
    FrameType,
    decode,
    encode,
)
from .kernel import Simulator
from .medium import Medium
from .radio import RadioProfile, SLEEP_CURRENT_MA, airtime


class RadioState(str, Enum):
    SLEEP = "SLEEP"
    RX_LISTEN = "RX_LISTEN"
    TX = "TX"


@dataclass
class MacTimings:
    wake_latency_us: int = 15_000
    discovery_latency_us: int = 30_000
    join_latency_us: int = 15_000
    superframe_period_us: int = 100_000
    slot_count: int = 16
    gts_slot_count: int = 4
    ack_timeout_us: int = 30_000
    max_retries: int = 5
    backoff_unit_us: int = 1_000
    backoff_initial_window: int = 8
    backoff_max_window: int = 256
    turnaround_us: int = 1_000
    dedup_window: int = 8
    poll_response_window_us: int = 100_000

    def __post_init__(self):
        if self.gts_slot_count >= self.slot_count:
            raise ValueError("gts_slot_count must be smaller than slot_count")
        for name in ("wake_latency_us", "discovery_latency_us", "join_latency_us",
                     "superframe_period_us", "ack_timeout_us", "backoff_unit_us",
                     "turnaround_us"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


class EnergyLedger:
    """Per-state time accounting; consumed charge follows from the currents."""

    def __init__(self, *, capacity_mAh: float = 2200.0, voltage: float = 3.0,
                 sleep_mA: float = SLEEP_CURRENT_MA, rx_mA: float = 18.5,
                 tx_mA: float = 20.0, start_us: int = 0,
                 start_state: RadioState = RadioState.RX_LISTEN):
        self.capacity_mAh = capacity_mAh
        self.voltage = voltage
        self.currents_mA = {
            RadioState.SLEEP: sleep_mA,
            RadioState.RX_LISTEN: rx_mA,
            RadioState.TX: tx_mA,
        }
        self.durations_us = {state: 0 for state in RadioState}
        self.created_us = start_us
        self._state = start_state
        self._since = start_us

    @property
    def state(self) -> RadioState:
        return self._state

    def switch(self, new_state: RadioState, now: int) -> None:
        self.durations_us[self._state] += now - self._since
        self._state = new_state
        self._since = now

    def snapshot_us(self, now: int) -> dict:
        out = dict(self.durations_us)
        out[self._state] += now - self._since
        return {state.value: us for state, us in out.items()}

    def lifetime_us(self, now: int) -> int:
        return now - self.created_us

    def consumed_mAh(self, now: int) -> float:
        snap = self.snapshot_us(now)
        hours = {k: v / 3_600_000_000 for k, v in snap.items()}
        return sum(hours[state.value] * amps for state, amps in self.currents_mA.items())

    def average_current_mA(self, now: int) -> float:
        lifetime = self.lifetime_us(now)
        if lifetime <= 0:
            return 0.0
        return self.consumed_mAh(now) / (lifetime / 3_600_000_000)

    def battery_fraction_remaining(self, now: int) -> float:
        if self.capacity_mAh <= 0:
            return 0.0
        return max(0.0, 1.0 - self.consumed_mAh(now) / self.capacity_mAh)


class SuperframeSchedule:
    """Beacon-delimited slot schedule shared by every node of one network.

    Slots [0, slot_count - gts_slot_count) form the contention access period
    (the beacon occupies the head of slot 0); the tail slots are guaranteed,
    one owner each, and contention traffic must finish before they begin.
    """

    def __init__(self, epoch_us: int, timings: MacTimings, beacon_airtime_us: int):
        self.epoch_us = epoch_us
        self.period_us = timings.superframe_period_us
        self.slot_count = timings.slot_count
        self.gts_slot_count = timings.gts_slot_count
        self.beacon_airtime_us = beacon_airtime_us
        self.grants: dict[int, int] = {}  # slot index -> owner addr

    @property
    def slot_us(self) -> int:
        return self.period_us // self.slot_count

    def frame_start(self, t: int) -> int:
        if t < self.epoch_us:
            return self.epoch_us
        return self.epoch_us + ((t - self.epoch_us) // self.period_us) * self.period_us

    def cap_bounds(self, frame_start: int) -> tuple[int, int]:
        cap_begin = frame_start + self.beacon_airtime_us
        first_gts = self.slot_count - self.gts_slot_count
        cap_end = frame_start + (first_gts * self.slot_us if self.gts_slot_count else self.period_us)
        return cap_begin, cap_end

    def next_cap_fit(self, t: int, duration: int) -> int:
        """Earliest start >= t such that [start, start+duration] stays in a CAP."""
        frame = self.frame_start(t)
        for _ in range(2):
            begin, end = self.cap_bounds(frame)
            if end - begin < duration:
                raise ValueError(f"exchange of {duration}us cannot fit a {end - begin}us contention period")
            candidate = max(t, begin)
            if candidate + duration <= end:
                return candidate
            frame += self.period_us
        raise AssertionError("unreachable")

    def gts_window(self, frame_start: int, slot: int) -> tuple[int, int]:
        start = frame_start + slot * self.slot_us
        return start, start + self.slot_us

    def next_owned_fit(self, t: int, slot: int, duration: int) -> int:
        if duration > self.slot_us:
            raise ValueError(f"exchange of {duration}us exceeds the {self.slot_us}us slot width")
        frame = self.frame_start(t)
        for _ in range(2):
            start, end = self.gts_window(frame, slot)
            if start >= t and start + duration <= end:
                return start
            frame += self.period_us
        raise AssertionError("unreachable")

    def in_gts_region(self, t: int) -> bool:
        if not self.gts_slot_count:
            return False
        frame = self.frame_start(t)
        _, cap_end = self.cap_bounds(frame)
        return t >= cap_end


@dataclass
class SendOutcome:
    delivered: bool
    attempts: int
    ack_payload: bytes = b""
    reason: str = ""
    completed_at: int = 0


# Reserve room for a 1-byte ACK payload (pending-count piggyback) when sizing
# the ACK leg of an exchange.
_ACK_WIRE_BYTES = 12


class _SendOp:
    __slots__ = ("frame", "raw", "expect_ack", "done", "attempts", "window",
                 "gts_slot", "timer")

    def __init__(self, frame: Frame, raw: bytes, expect_ack: bool, done, window: int,
                 gts_slot: int | None):
        self.frame = frame
        self.raw = raw
        self.expect_ack = expect_ack
        self.done = done
        self.attempts = 0
        self.window = window
        self.gts_slot = gts_slot
        self.timer = None


class MacNode:
    def __init__(self, sim: Simulator, medium: Medium, node_id: str,
                 profile: RadioProfile, timings: MacTimings, *,
                 mode: str = "selforg", mains: bool = False,
                 ledger: EnergyLedger | None = None,
                 addr: int | None = None, net_id: int | None = None):
        if mode not in ("selforg", "naive"):
            raise ValueError(f"unknown MAC mode {mode!r}")
        self.sim = sim
        self.medium = medium
        self.node_id = node_id
        self.profile = profile
        self.timings = timings
        self.mode = mode
        self.mains = mains
        self.addr = addr
        self.net_id = net_id
        self.schedule: SuperframeSchedule | None = None
        self.rng = sim.rng.fork()
        self.ledger = ledger or EnergyLedger(
            rx_mA=profile.rx_current_mA, tx_mA=profile.tx_current_mA(), start_us=sim.now)
        self._state = RadioState.RX_LISTEN
        self._listen_since = sim.now
        self._tx_busy_until = sim.now
        self._seq = 0
        self._ops: deque[_SendOp] = deque()
        self._current: _SendOp | None = None
        self._awaiting: _SendOp | None = None
        self._seen: dict[tuple[int, int], deque] = {}
        self._sleep_when_idle = False
        self.on_data = None          # fn(frame)
        self.on_control = None       # fn(frame)
        self.ack_payload_for = None  # fn(frame) -> bytes
        medium.register(node_id, (0.0, 0.0), profile, self)

    # -- placement ---------------------------------------------------------

    def place(self, position: tuple[float, float]) -> None:
        self.medium.nodes[self.node_id].position = (float(position[0]), float(position[1]))

    # -- radio state -------------------------------------------------------

    @property
    def state(self) -> RadioState:
        return self._state

    def _set_state(self, new_state: RadioState) -> None:
        if new_state == self._state:
            return
        self.ledger.switch(new_state, self.sim.now)
        if not self.mains:
            # mains nodes churn TX/RX constantly and their draw is not a
            # product claim; only battery nodes trace state transitions
            self.sim.emit(self.node_id, "mac.state",
                          frm=self._state.value, to=new_state.value)
        self._state = new_state
        if new_state == RadioState.RX_LISTEN:
            self._listen_since = self.sim.now

    def is_listening(self, start: int, end: int) -> bool:
        return self._state == RadioState.RX_LISTEN and self._listen_since <= start

    def awake(self) -> bool:
        return self._state != RadioState.SLEEP

    def ready_at(self) -> int:
        """When the radio can next act (wake warmup included)."""
        if self._state == RadioState.SLEEP:
            return self.wake()
        return max(self.sim.now, self._listen_since)

    def wake(self) -> int:
        """Leave sleep mode; returns the time the radio becomes usable."""
        if self._state != RadioState.SLEEP:
            return max(self.sim.now, self._listen_since)
        self._sleep_when_idle = False
        self.ledger.switch(RadioState.RX_LISTEN, self.sim.now)
        if not self.mains:
            self.sim.emit(self.node_id, "mac.state", frm="SLEEP", to="RX_LISTEN")
        self._state = RadioState.RX_LISTEN
        self._listen_since = self.sim.now + self.timings.wake_latency_us
        return self._listen_since

    def sleep(self) -> None:
        if self.mains:
            return
        if self._current is not None or self._ops:
            self._sleep_when_idle = True
            return
        self._sleep_when_idle = False
        self._set_state(RadioState.SLEEP)

    def _maybe_sleep(self) -> None:
        if self._sleep_when_idle and self._current is None and not self._ops:
            self._sleep_when_idle = False
            self._set_state(RadioState.SLEEP)

    # -- sending -----------------------------------------------------------

    def next_seq(self) -> int:
        seq = self._seq
        self._seq = (self._seq + 1) & 0xFF
        return seq

    def send(self, frame: Frame, done=None, gts_slot: int | None = None) -> None:
        """Queue a frame; delivery/acknowledgment reported through `done`."""
        raw = encode(frame)
        expect_ack = (self.mode == "selforg"
                      and frame.frame_type == FrameType.DATA
                      and frame.dst != BROADCAST_ADDR)
        op = _SendOp(frame, raw, expect_ack, done,
                     self.timings.backoff_initial_window, gts_slot)
        self._ops.append(op)
        self._kick()

    def _kick(self) -> None:
        if self._current is None and self._ops:
            self._current = self._ops.popleft()
            self.sim.schedule_in(0, lambda op=self._current: self._start_op(op))

    def _exchange_duration(self, op: _SendOp) -> int:
        d = airtime(len(op.raw) * 8, self.profile.rate_bps)
        if op.expect_ack:
            d += self.timings.turnaround_us + airtime(_ACK_WIRE_BYTES * 8, self.profile.rate_bps)
        return d

    def _start_op(self, op: _SendOp) -> None:
        wait = max(self._tx_busy_until, self.ready_at()) - self.sim.now
        if wait > 0:
            self.sim.schedule_in(wait, lambda: self._start_op(op))
            return
        if self.mode == "naive":
            self._tx_now(op)
            return
        if op.gts_slot is not None:
            start = self.schedule.next_owned_fit(self.sim.now, op.gts_slot, self._exchange_duration(op))
            self.sim.schedule_at(start, lambda: self._tx_now(op))
            return
        self._cca_and_tx(op)

    def _cca_and_tx(self, op: _SendOp) -> None:
        if self.schedule is not None:
            start = self.schedule.next_cap_fit(self.sim.now, self._exchange_duration(op))
            if start > self.sim.now:
                # Deferred to a contention window: add a dither draw so every
                # deferred sender does not probe the channel at the same tick.
                dither = self.rng.draw_range(0, self.timings.backoff_initial_window - 1)
                self.sim.schedule_at(start + dither * self.timings.backoff_unit_us,
                                     lambda: self._cca_and_tx(op))
                return
        if self.medium.channel_busy(self.node_id):
            self._backoff(op)
            return
        self._tx_now(op)

    def _backoff(self, op: _SendOp) -> None:
        op.window = min(op.window * 2, self.timings.backoff_max_window)
        delay = self.rng.draw_range(0, op.window - 1) * self.timings.backoff_unit_us
        self.sim.schedule_in(delay, lambda: self._cca_and_tx(op))

    def _tx_now(self, op: _SendOp) -> None:
        wait = self._tx_busy_until - self.sim.now
        if wait > 0:
            # Our own radio is mid-transmission (e.g. an ACK); serialize.
            self.sim.schedule_in(wait, lambda: self._tx_now(op))
            return
        op.attempts += 1
        self._set_state(RadioState.TX)
        _, end = self.medium.transmit(self.node_id, op.raw)
        self._tx_busy_until = end
        self.sim.schedule_at(end, lambda: self._tx_done(op))

    def _tx_done(self, op: _SendOp) -> None:
        self._set_state(RadioState.RX_LISTEN)
        if not op.expect_ack:
            self._complete(op, True)
            return
        self._awaiting = op
        op.timer = self.sim.schedule_in(self.timings.ack_timeout_us,
                                        lambda: self._ack_timeout(op))

    def _ack_timeout(self, op: _SendOp) -> None:
        self._awaiting = None
        if op.attempts > self.timings.max_retries:
            self.sim.emit(self.node_id, "mac.fail", dst=op.frame.dst, seq=op.frame.seq,
                          attempts=op.attempts)
            self._complete(op, False, reason="no_ack")
            return
        op.window = min(op.window * 2, self.timings.backoff_max_window)
        delay = self.rng.draw_range(0, op.window - 1) * self.timings.backoff_unit_us
        if op.gts_slot is not None:
            self.sim.schedule_in(0, lambda: self._start_op_retry_gts(op))
        else:
            self.sim.schedule_in(delay, lambda: self._cca_and_tx(op))

    def _start_op_retry_gts(self, op: _SendOp) -> None:
        start = self.schedule.next_owned_fit(self.sim.now, op.gts_slot, self._exchange_duration(op))
        self.sim.schedule_at(start, lambda: self._tx_now(op))

    def _complete(self, op: _SendOp, delivered: bool, *, ack_payload: bytes = b"",
                  reason: str = "") -> None:
        if op.timer is not None:
            self.sim.cancel(op.timer)
            op.timer = None
        if self._awaiting is op:
            self._awaiting = None
        self._current = None
        outcome = SendOutcome(delivered=delivered, attempts=op.attempts,
                              ack_payload=ack_payload, reason=reason,
                              completed_at=self.sim.now)
        if op.done is not None:
            op.done(outcome)
        self._maybe_sleep()
        self._kick()

    # -- receiving ---------------------------------------------------------

    def deliver(self, data: bytes, src_node: str, power_dBm: float) -> None:
        # address peek before the full CRC pass: unicast traffic for another
        # node is dropped without decoding (the medium only hands over intact
        # frames, so the skipped CRC could not have failed)
        if len(data) > 6:
            ftype, dst = data[2], data[6]
            if ftype in (0x01, 0x02):  # DATA / ACK
                if self.addr is None:
                    return
                if dst != self.addr and dst != BROADCAST_ADDR:
                    return
        try:
            f = decode(data)
        except FrameError as exc:
            self.sim.emit(self.node_id, "mac.decode_error", error=type(exc).__name__)
            return
        if f.frame_type == FrameType.ACK:
            self._on_ack(f)
            return
        if f.frame_type == FrameType.DATA:
            self._on_data(f)
            return
        if self.on_control is not None:
            self.on_control(f)

    def _on_ack(self, f: Frame) -> None:
        op = self._awaiting
        if op is None or self.addr is None:
            return
        if (f.net_id == self.net_id and f.dst == self.addr
                and f.src == op.frame.dst and f.seq == op.frame.seq):
            self.sim.emit(self.node_id, "mac.ack", seq=f.seq, attempts=op.attempts)
            if op.timer is not None:
                self.sim.cancel(op.timer)
                op.timer = None
            self._awaiting = None
            self._complete(op, True, ack_payload=f.payload)

    def _on_data(self, f: Frame) -> None:
        if self.net_id is None or f.net_id != self.net_id:
            return
        if self.addr is None or (f.dst != self.addr and f.dst != BROADCAST_ADDR):
            return
        self.sim.emit(self.node_id, "rf.rx", src=f.src, seq=f.seq,
                      bytes=f.wire_length)
        if f.dst != BROADCAST_ADDR and self.mode == "selforg":
            self._schedule_ack(f)
        key = (f.net_id, f.src)
        seen = self._seen.setdefault(key, deque(maxlen=self.timings.dedup_window))
        if f.seq in seen:
            self.sim.emit(self.node_id, "mac.dedup", src=f.src, seq=f.seq)
            return
        seen.append(f.seq)
        if self.on_data is not None:
            self.on_data(f)

    def _schedule_ack(self, f: Frame) -> None:
        payload = b""
        if self.ack_payload_for is not None:
            payload = self.ack_payload_for(f)
        ack = Frame(frame_type=FrameType.ACK, net_id=f.net_id, src=self.addr,
                    dst=f.src, seq=f.seq, payload=payload)
        self.sim.schedule_in(self.timings.turnaround_us, lambda: self.raw_send(ack))

    # -- raw (CCA-free) transmission: ACKs, beacons, probe responses --------

    def raw_send(self, frame: Frame, done=None) -> None:
        raw = encode(frame)
        start = max(self.sim.now, self._tx_busy_until, self.ready_at())
        if start > self.sim.now:
            self.sim.schedule_at(start, lambda: self.raw_send(frame, done))
            return
        self._set_state(RadioState.TX)
        _, end = self.medium.transmit(self.node_id, raw)
        self._tx_busy_until = end
        def finish():
            self._set_state(RadioState.RX_LISTEN)
            if done is not None:
                done(end)
        self.sim.schedule_at(end, finish)
