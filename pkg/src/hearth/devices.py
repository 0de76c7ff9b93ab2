"""Device terminals: per-kind payload codecs, sensing, actuation, extension.

Every command/report travels as one TLV inside the RF frame payload:

    tlv_type(1) | length(1) | value(length)

REPORT values start with a reason byte (periodic, command-ack, query reply,
error) followed by the kind's state encoding; ALARM values start with the
kind's alarm code.  Kind ids 0x01-0x7F are built in, 0x80-0xFF are reserved
for third-party kinds registered through `KindRegistry.register`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .frame import COORDINATOR_ADDR, Frame, FrameType
from .kernel import Simulator, us_from_s
from .mac import MacNode
from .network import DeviceLink
from .radio import airtime

# TLV types
SET_ACTUATOR = 0x01
QUERY_STATE = 0x02
REPORT = 0x03
ALARM = 0x04

# REPORT reason codes
REASON_PERIODIC = 0x00
REASON_CMD_ACK = 0x01
REASON_QUERY = 0x02
REASON_ERROR = 0x7F

# error codes carried by REASON_ERROR reports
ERR_UNSUPPORTED = 0x01
ERR_DECODE = 0x02

THIRD_PARTY_MIN = 0x80


class TlvError(Exception):
    pass


class UnsupportedCommand(Exception):
    pass


class KindConflict(Exception):
    pass


def encode_tlv(tlv_type: int, value: bytes) -> bytes:
    if len(value) > 62:
        raise TlvError(f"TLV value of {len(value)} bytes exceeds the frame budget")
    return bytes([tlv_type, len(value)]) + value


def decode_tlv(payload: bytes) -> tuple[int, bytes]:
    if len(payload) < 2:
        raise TlvError("TLV truncated")
    tlv_type, length = payload[0], payload[1]
    if len(payload) < 2 + length:
        raise TlvError(f"TLV length {length} exceeds payload")
    return tlv_type, payload[2:2 + length]


def _u16(v: int) -> bytes:
    return int(v).to_bytes(2, "big")


def _i16(v: int) -> bytes:
    return int(v).to_bytes(2, "big", signed=True)


@dataclass(frozen=True)
class DeviceKind:
    kind_id: int
    name: str
    actuator: bool
    sensor: bool
    initial_state: object          # fn() -> state dict
    encode_state: object           # fn(state) -> bytes
    apply_command: object = None   # fn(state, value_bytes) -> state  (actuators)
    ingest_sample: object = None   # fn(state, sample) -> state       (sensors)
    alarm_check: object = None     # fn(state, sample, thresholds) -> (code, bytes)|None
    armed_gated: bool = False
    default_thresholds: dict = field(default_factory=dict)


def _onoff_apply(state, value):
    if len(value) != 1 or value[0] not in (0, 1):
        raise TlvError(f"on/off command wants one byte of 0/1, got {value.hex()}")
    return {**state, "on": bool(value[0])}


def _clamp(v, lo, hi):
    return max(lo, min(hi, v))


PLUG = DeviceKind(
    kind_id=0x01, name="plug", actuator=True, sensor=False,
    initial_state=lambda: {"on": False},
    encode_state=lambda s: bytes([1 if s["on"] else 0]),
    apply_command=_onoff_apply,
)

BULB = DeviceKind(
    kind_id=0x02, name="bulb", actuator=True, sensor=False,
    initial_state=lambda: {"on": False, "level": 255},
    encode_state=lambda s: bytes([1 if s["on"] else 0, s["level"]]),
    apply_command=lambda s, v: (
        {**s, "on": bool(v[0]), **({"level": v[1]} if len(v) > 1 else {})}
        if 1 <= len(v) <= 2 and v[0] in (0, 1)
        else (_ for _ in ()).throw(TlvError("bulb command wants on[,level]"))),
)

DOOR_CONTACT = DeviceKind(
    kind_id=0x03, name="door_contact", actuator=False, sensor=True,
    initial_state=lambda: {"open": False},
    encode_state=lambda s: bytes([1 if s["open"] else 0]),
    ingest_sample=lambda s, sample: {**s, "open": bool(sample.get("open", s["open"]))},
    alarm_check=lambda s, sample, th: (
        (0x03, bytes([1])) if sample.get("open") else None),
    armed_gated=True,
)

PIR_MOTION = DeviceKind(
    kind_id=0x04, name="pir_motion", actuator=False, sensor=True,
    initial_state=lambda: {"motion": False},
    encode_state=lambda s: bytes([1 if s["motion"] else 0]),
    ingest_sample=lambda s, sample: {**s, "motion": bool(sample.get("motion", False))},
    alarm_check=lambda s, sample, th: (
        (0x04, bytes([1])) if sample.get("motion") else None),
    armed_gated=True,
)

GAS = DeviceKind(
    kind_id=0x05, name="gas", actuator=False, sensor=True,
    initial_state=lambda: {"level": 0},
    encode_state=lambda s: bytes([1 if s["level"] >= 300 else 0]) + _u16(s["level"]),
    ingest_sample=lambda s, sample: {**s, "level": int(sample.get("level", s["level"]))},
    alarm_check=lambda s, sample, th: (
        (0x05, _u16(sample["level"])) if sample.get("level", 0) >= th["gas_level"] else None),
    default_thresholds={"gas_level": 300},
)

SMOKE = DeviceKind(
    kind_id=0x06, name="smoke", actuator=False, sensor=True,
    initial_state=lambda: {"level": 0},
    encode_state=lambda s: bytes([1 if s["level"] >= 150 else 0]) + _u16(s["level"]),
    ingest_sample=lambda s, sample: {**s, "level": int(sample.get("level", s["level"]))},
    alarm_check=lambda s, sample, th: (
        (0x06, _u16(sample["level"])) if sample.get("level", 0) >= th["smoke_level"] else None),
    default_thresholds={"smoke_level": 150},
)


def _th_ingest(s, sample):
    out = dict(s)
    if "temp_c" in sample:
        out["temp_c"] = float(sample["temp_c"])
    if "humidity" in sample:
        out["humidity"] = float(sample["humidity"])
    return out


def _th_alarm(s, sample, th):
    temp = sample.get("temp_c")
    if temp is not None and not th["temp_low_c"] <= temp <= th["temp_high_c"]:
        return 0x07, _i16(round(temp * 100))
    hum = sample.get("humidity")
    if hum is not None and not th["humidity_low"] <= hum <= th["humidity_high"]:
        return 0x17, _u16(round(hum * 10))
    return None


TEMP_HUMIDITY = DeviceKind(
    kind_id=0x07, name="temp_humidity", actuator=False, sensor=True,
    initial_state=lambda: {"temp_c": 21.5, "humidity": 45.0},
    encode_state=lambda s: _i16(round(s["temp_c"] * 100)) + _u16(round(s["humidity"] * 10)),
    ingest_sample=_th_ingest,
    alarm_check=_th_alarm,
    default_thresholds={"temp_low_c": 10.0, "temp_high_c": 35.0,
                        "humidity_low": 20.0, "humidity_high": 80.0},
)

PM25 = DeviceKind(
    kind_id=0x08, name="pm25", actuator=False, sensor=True,
    initial_state=lambda: {"ug_m3": 12},
    encode_state=lambda s: _u16(s["ug_m3"]),
    ingest_sample=lambda s, sample: {**s, "ug_m3": int(sample.get("ug_m3", s["ug_m3"]))},
    alarm_check=lambda s, sample, th: (
        (0x08, _u16(sample["ug_m3"])) if sample.get("ug_m3", 0) >= th["pm25_alert"] else None),
    default_thresholds={"pm25_alert": 150},
)

VIBRATION_TOUCH = DeviceKind(
    kind_id=0x09, name="vibration_touch", actuator=False, sensor=True,
    initial_state=lambda: {"triggered": False},
    encode_state=lambda s: bytes([1 if s["triggered"] else 0]),
    ingest_sample=lambda s, sample: {**s, "triggered": bool(sample.get("touch", False))},
    alarm_check=lambda s, sample, th: (
        (0x09, bytes([1])) if sample.get("touch") else None),
    armed_gated=True,
)

CURTAIN = DeviceKind(
    kind_id=0x0A, name="curtain", actuator=True, sensor=False,
    initial_state=lambda: {"position": 0},
    encode_state=lambda s: bytes([s["position"]]),
    apply_command=lambda s, v: (
        {**s, "position": _clamp(v[0], 0, 100)} if len(v) == 1
        else (_ for _ in ()).throw(TlvError("curtain command wants one position byte"))),
)

IR_BLASTER = DeviceKind(
    kind_id=0x0B, name="ir_blaster", actuator=True, sensor=False,
    initial_state=lambda: {"last_code": b""},
    encode_state=lambda s: s["last_code"][:32],
    apply_command=lambda s, v: (
        {**s, "last_code": bytes(v)} if v
        else (_ for _ in ()).throw(TlvError("ir code must not be empty"))),
)

CAMERA = DeviceKind(
    kind_id=0x0C, name="camera", actuator=False, sensor=False,
    initial_state=lambda: {},
    encode_state=lambda s: b"",
)

BUILTIN_KINDS = [PLUG, BULB, DOOR_CONTACT, PIR_MOTION, GAS, SMOKE, TEMP_HUMIDITY,
                 PM25, VIBRATION_TOUCH, CURTAIN, IR_BLASTER, CAMERA]


class KindRegistry:
    def __init__(self):
        self._by_id: dict[int, DeviceKind] = {}
        self._by_name: dict[str, DeviceKind] = {}
        for kind in BUILTIN_KINDS:
            self._by_id[kind.kind_id] = kind
            self._by_name[kind.name] = kind

    def register(self, kind: DeviceKind) -> DeviceKind:
        """Third-party extension hook; new kind ids live in 0x80-0xFF."""
        if kind.kind_id in self._by_id or kind.name in self._by_name:
            raise KindConflict(f"kind {kind.kind_id:#04x}/{kind.name!r} already registered")
        if kind.kind_id < THIRD_PARTY_MIN or kind.kind_id > 0xFF:
            raise KindConflict(
                f"third-party kind id {kind.kind_id:#04x} outside 0x80-0xFF")
        self._by_id[kind.kind_id] = kind
        self._by_name[kind.name] = kind
        return kind

    def get(self, name_or_id) -> DeviceKind:
        if isinstance(name_or_id, int):
            return self._by_id[name_or_id]
        return self._by_name[name_or_id]

    def names(self) -> list[str]:
        return sorted(self._by_name)


@dataclass
class DeviceSpec:
    device_id: int
    kind: DeviceKind
    mains: bool = False
    armed: bool = False
    report_interval_s: float = 10.0
    poll_interval_s: float = 2.0
    report_pad_to: int = 32
    thresholds: dict = field(default_factory=dict)


class DeviceTerminal:
    """One end node: joins the star, reports, alarms, obeys commands."""

    def __init__(self, sim: Simulator, mac: MacNode, link: DeviceLink, spec: DeviceSpec):
        self.sim = sim
        self.mac = mac
        self.link = link
        self.spec = spec
        self.kind = spec.kind
        self.state = self.kind.initial_state()
        self.sample: dict = {}
        self.armed = spec.armed
        thresholds = dict(self.kind.default_thresholds)
        thresholds.update(spec.thresholds)
        self.thresholds = thresholds
        self._started = False
        self._last_upstream_start = -(10 ** 12)
        link.on_downlink = self._on_downlink

    # -- lifecycle ------------------------------------------------------------

    def start(self) -> None:
        """Begin report/poll cycles (device must already be joined)."""
        if self._started:
            return
        self._started = True
        if self.spec.report_interval_s:
            self.sim.schedule_in(us_from_s(self.spec.report_interval_s), self._report_tick)
        if not self.spec.mains:
            self.sim.schedule_in(us_from_s(self.spec.poll_interval_s), self._poll_tick)
            self.mac.sleep()

    def _response_gap(self) -> int:
        # let our MAC-level ACK leave the air before the follow-up frame
        t = self.mac.timings
        return 2 * t.turnaround_us + airtime(12 * 8, self.mac.profile.rate_bps)

    # -- reporting --------------------------------------------------------------

    def _report_payload(self, reason: int, extra: bytes = b"") -> bytes:
        value = bytes([reason]) + extra + self.kind.encode_state(self.state)
        payload = encode_tlv(REPORT, value)
        if len(payload) < self.spec.report_pad_to:
            payload += b"\x00" * (self.spec.report_pad_to - len(payload))
        return payload

    def _send_upstream(self, payload: bytes, done=None, kind_label="report") -> None:
        self._last_upstream_start = self.sim.now
        self.mac.wake()
        frame = Frame(FrameType.DATA, self.link.net_id, self.link.addr,
                      COORDINATOR_ADDR, self.mac.next_seq(), payload)

        def finished(outcome):
            pending = outcome.ack_payload[0] if outcome.ack_payload else 0
            if outcome.delivered and pending > 0:
                self.link.poll_drain(lambda: self._idle())
            else:
                self._idle()
            if done is not None:
                done(outcome)

        self.mac.send(frame, done=finished)

    def _idle(self) -> None:
        if not self.spec.mains:
            self.mac.sleep()

    def _report_tick(self) -> None:
        self.report_now()
        self.sim.schedule_in(us_from_s(self.spec.report_interval_s), self._report_tick)

    def report_now(self) -> None:
        """One report outside (or inside) the periodic schedule."""
        if self.link.joined:
            self.sim.emit(self.mac.node_id, "dev.report", device_kind=self.kind.name,
                          addr=self.link.addr)
            self._send_upstream(self._report_payload(REASON_PERIODIC))

    def _poll_tick(self) -> None:
        interval = us_from_s(self.spec.poll_interval_s)
        # a recent report already served as a poll (its ACK carries the count)
        fresh = self.sim.now - self._last_upstream_start < interval // 2
        if self.link.joined and not fresh:
            self._last_upstream_start = self.sim.now
            self.mac.wake()
            self.link.poll_drain(self._idle)
        self.sim.schedule_in(interval, self._poll_tick)

    # -- sensing ---------------------------------------------------------------

    def on_env(self, sample: dict) -> None:
        """Fold an environment sample in; fire an alarm if a threshold trips."""
        clean = dict(sample)
        for key, value in sample.items():
            if isinstance(value, (int, float)) and not isinstance(value, bool):
                if abs(value) > 1e9:
                    clean[key] = 0
                    self.sim.emit(self.mac.node_id, "dev.clamp", field=key)
        self.sample.update(clean)
        if self.kind.ingest_sample is not None:
            self.state = self.kind.ingest_sample(self.state, clean)
        if self.kind.alarm_check is None:
            return
        if self.kind.armed_gated and not self.armed:
            return
        hit = self.kind.alarm_check(self.state, clean, self.thresholds)
        if hit is None:
            return
        code, data = hit
        self.sim.emit(self.mac.node_id, "dev.threshold", device_kind=self.kind.name,
                      code=code, addr=self.link.addr)
        payload = encode_tlv(ALARM, bytes([code]) + data)
        self.sim.emit(self.mac.node_id, "dev.alarm", device_kind=self.kind.name,
                      code=code, addr=self.link.addr)
        self._send_upstream(payload, kind_label="alarm")

    # -- command handling --------------------------------------------------------

    def _on_downlink(self, payload: bytes, frame: Frame) -> None:
        try:
            tlv_type, value = decode_tlv(payload)
        except TlvError:
            self._respond(REASON_ERROR, bytes([ERR_DECODE]))
            return
        if tlv_type == SET_ACTUATOR:
            if not self.kind.actuator:
                self.sim.emit(self.mac.node_id, "dev.unsupported", device_kind=self.kind.name)
                self._respond(REASON_ERROR, bytes([ERR_UNSUPPORTED]))
                return
            try:
                self.state = self.kind.apply_command(self.state, value)
            except (TlvError, IndexError):
                self._respond(REASON_ERROR, bytes([ERR_DECODE]))
                return
            self.sim.emit(self.mac.node_id, "dev.apply", device_kind=self.kind.name,
                          state=self.kind.encode_state(self.state).hex())
            self._respond(REASON_CMD_ACK)
        elif tlv_type == QUERY_STATE:
            self._respond(REASON_QUERY)
        # REPORT/ALARM downlink makes no sense at a terminal; ignored

    def _respond(self, reason: int, extra: bytes = b"") -> None:
        payload = self._report_payload(reason, extra)
        self.sim.schedule_in(self._response_gap(), lambda: self._send_upstream(payload))
