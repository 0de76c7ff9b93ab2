"""Closed-form battery lifetime from the device duty cycle.

Average current is assembled from per-cycle airtimes (report frame, poll
frame, ACK), the wake warmup spent listening, and the sleep floor, then
lifetime is simply capacity over average draw.  Defaults document the
assumptions behind the headline figure: two AA cells as 2200mAh at 3.0V and
a 1.5uA sleep current.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

HOURS_PER_YEAR = 8766.0  # 365.25 days


@dataclass
class SleepProfile:
    report_interval_s: float = 10.0
    poll_interval_s: float = 2.0
    report_payload_bytes: int = 32
    always_on: bool = False


@dataclass
class RadioDraw:
    capacity_mAh: float = 2200.0
    voltage_v: float = 3.0
    sleep_mA: float = 0.0015
    rx_mA: float = 18.5
    tx_mA: float = 20.0
    rate_bps: float = 10_000.0
    wake_ms: float = 15.0
    turnaround_ms: float = 1.0
    frame_overhead_bytes: int = 11  # header + CRC, empty payload
    ack_bytes: int = 12


def _rate(interval_s: float | None) -> float:
    if interval_s is None or interval_s <= 0 or math.isinf(interval_s):
        return 0.0
    return 1.0 / interval_s


def average_current_mA(profile: SleepProfile, draw: RadioDraw | None = None) -> float:
    draw = draw or RadioDraw()
    if profile.always_on:
        return draw.rx_mA
    r_report = _rate(profile.report_interval_s)
    r_poll = max(0.0, _rate(profile.poll_interval_s) - r_report)

    report_bytes = draw.frame_overhead_bytes + profile.report_payload_bytes
    t_tx_report = 8.0 * report_bytes / draw.rate_bps
    t_tx_poll = 8.0 * draw.frame_overhead_bytes / draw.rate_bps
    t_rx_per_wake = (draw.wake_ms + draw.turnaround_ms) / 1000.0 \
        + 8.0 * draw.ack_bytes / draw.rate_bps

    tx_frac = r_report * t_tx_report + r_poll * t_tx_poll
    rx_frac = (r_report + r_poll) * t_rx_per_wake
    sleep_frac = 1.0 - tx_frac - rx_frac
    if sleep_frac < 0:
        # duty cycle over 100%: the radio never sleeps
        total = tx_frac + rx_frac
        return (tx_frac * draw.tx_mA + rx_frac * draw.rx_mA) / total
    return tx_frac * draw.tx_mA + rx_frac * draw.rx_mA + sleep_frac * draw.sleep_mA


def lifetime_hours(profile: SleepProfile, draw: RadioDraw | None = None) -> float:
    draw = draw or RadioDraw()
    if draw.capacity_mAh <= 0:
        raise ValueError(f"battery capacity must be positive, got {draw.capacity_mAh}")
    avg = average_current_mA(profile, draw)
    return draw.capacity_mAh / avg


def lifetime_years(profile: SleepProfile, draw: RadioDraw | None = None) -> float:
    return lifetime_hours(profile, draw) / HOURS_PER_YEAR
