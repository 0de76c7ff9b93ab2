"""Bit-exact RF frame codec.

Layout (big-endian multi-byte fields), 9-byte header + payload + 2-byte CRC:

    sync(2)=A5 5A | type(1) | net_id(2) | src(1) | dst(1) | seq(1) |
    payload_len(1) | payload(0..64) | crc16(2)

The CRC is CRC-16/CCITT-FALSE (poly 0x1021, init 0xFFFF, no reflection)
over every byte after the sync word, CRC field excluded.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

SYNC = b"\xa5\x5a"
HEADER_LEN = 9  # sync..payload_len inclusive
CRC_LEN = 2
MAX_PAYLOAD = 64

COORDINATOR_ADDR = 0x00
BROADCAST_ADDR = 0xFF
UNASSIGNED_ADDR = 0xFF  # src value used by devices that have not joined yet
WILDCARD_NET = 0xFFFF


class FrameType(IntEnum):
    DATA = 0x01
    ACK = 0x02
    BEACON = 0x03
    JOIN_REQ = 0x05
    JOIN_ACK = 0x06
    DISCOVERY = 0x07


class FrameError(Exception):
    pass


class BadSync(FrameError):
    pass


class BadLength(FrameError):
    pass


class BadCrc(FrameError):
    pass


class BadType(FrameError):
    pass


def _build_crc_table() -> tuple:
    table = []
    for i in range(256):
        crc = i << 8
        for _ in range(8):
            crc = ((crc << 1) ^ 0x1021) if crc & 0x8000 else (crc << 1)
            crc &= 0xFFFF
        table.append(crc)
    return tuple(table)


_CRC_TABLE = _build_crc_table()


def crc16_ccitt_false(data: bytes) -> int:
    crc = 0xFFFF
    table = _CRC_TABLE
    for byte in data:
        crc = ((crc << 8) & 0xFFFF) ^ table[(crc >> 8) ^ byte]
    return crc


@dataclass(frozen=True)
class Frame:
    frame_type: FrameType
    net_id: int
    src: int
    dst: int
    seq: int
    payload: bytes = field(default=b"")

    def __post_init__(self):
        if not 0 <= self.net_id <= 0xFFFF:
            raise ValueError(f"net_id {self.net_id:#x} out of range")
        for name, v in (("src", self.src), ("dst", self.dst), ("seq", self.seq)):
            if not 0 <= v <= 0xFF:
                raise ValueError(f"{name} {v:#x} out of range")
        if len(self.payload) > MAX_PAYLOAD:
            raise ValueError(f"payload {len(self.payload)} bytes exceeds {MAX_PAYLOAD}")

    @property
    def wire_length(self) -> int:
        return HEADER_LEN + len(self.payload) + CRC_LEN


def encode(f: Frame) -> bytes:
    body = bytes([
        int(f.frame_type),
        (f.net_id >> 8) & 0xFF, f.net_id & 0xFF,
        f.src, f.dst, f.seq,
        len(f.payload),
    ]) + f.payload
    crc = crc16_ccitt_false(body)
    return SYNC + body + bytes([(crc >> 8) & 0xFF, crc & 0xFF])


def decode(raw: bytes) -> Frame:
    if len(raw) < HEADER_LEN + CRC_LEN:
        raise BadLength(f"frame truncated: {len(raw)} bytes")
    if raw[:2] != SYNC:
        raise BadSync(f"bad sync word {raw[:2].hex()}")
    body = raw[2:-2]
    payload_len = raw[8]
    if len(raw) != HEADER_LEN + payload_len + CRC_LEN:
        raise BadLength(f"payload_len {payload_len} does not match frame of {len(raw)} bytes")
    crc_wire = (raw[-2] << 8) | raw[-1]
    crc_calc = crc16_ccitt_false(body)
    if crc_wire != crc_calc:
        raise BadCrc(f"crc mismatch: wire {crc_wire:#06x}, computed {crc_calc:#06x}")
    try:
        ftype = FrameType(raw[2])
    except ValueError as exc:
        raise BadType(f"unknown frame type {raw[2]:#04x}") from exc
    return Frame(
        frame_type=ftype,
        net_id=(raw[3] << 8) | raw[4],
        src=raw[5],
        dst=raw[6],
        seq=raw[7],
        payload=raw[9:9 + payload_len],
    )
