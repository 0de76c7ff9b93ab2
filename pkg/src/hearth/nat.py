"""NAT traversal model and the relay-vs-P2P path decision.

Small payloads ride the server relay; large ones attempt a brokered hole
punch first.  Punching fails when both endpoints are symmetric, or when a
symmetric endpoint faces a port-restricted one (port prediction cannot beat
per-destination port allocation); every other combination succeeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

RELAY_SIZE_THRESHOLD = 4096


class NatType(str, Enum):
    OPEN = "open"
    FULL_CONE = "full_cone"
    RESTRICTED = "restricted"
    PORT_RESTRICTED = "port_restricted"
    SYMMETRIC = "symmetric"


class PathChoice(str, Enum):
    RELAY = "relay"
    P2P_DIRECT = "p2p_direct"
    P2P_FALLBACK_RELAY = "p2p_failed_fallback_relay"


@dataclass(frozen=True)
class NatProfile:
    nat_type: NatType
    observed_endpoint: str = ""


@dataclass(frozen=True)
class PathDecision:
    payload_size: int
    nat_a: NatType
    nat_b: NatType
    decision: PathChoice


def punch_succeeds(a: NatType, b: NatType) -> bool:
    pair = {a, b}
    if pair == {NatType.SYMMETRIC}:
        return False
    if pair == {NatType.SYMMETRIC, NatType.PORT_RESTRICTED}:
        return False
    return True


def decide_path(payload_size: int, nat_a: NatProfile | NatType,
                nat_b: NatProfile | NatType,
                threshold: int = RELAY_SIZE_THRESHOLD) -> PathDecision:
    a = nat_a.nat_type if isinstance(nat_a, NatProfile) else nat_a
    b = nat_b.nat_type if isinstance(nat_b, NatProfile) else nat_b
    if payload_size <= threshold:
        choice = PathChoice.RELAY
    elif punch_succeeds(a, b):
        choice = PathChoice.P2P_DIRECT
    else:
        choice = PathChoice.P2P_FALLBACK_RELAY
    return PathDecision(payload_size=payload_size, nat_a=a, nat_b=b, decision=choice)
