"""Metrics report computed from the trace alone.

Everything here folds over trace events; nothing peeks at live simulation
state, so a report can be recomputed from a stored JSONL file and two runs
of the same seed produce identical reports.
"""

from __future__ import annotations

import math
from collections import defaultdict, deque

from .battery import RadioDraw, SleepProfile, lifetime_hours, lifetime_years
from .trace import TraceEvent


def _nearest_rank(sorted_values, fraction: float):
    """Nearest-rank percentile on a pre-sorted list."""
    if not sorted_values:
        return None
    rank = math.ceil(fraction * len(sorted_values))
    rank = min(len(sorted_values), max(1, rank))
    return sorted_values[rank - 1]


def compute_report(events: list[TraceEvent], *, end_us: int | None = None) -> dict:
    if end_us is None:
        end_us = events[-1].t if events else 0

    device_meta: dict[str, dict] = {}
    reports_attempted = 0
    alarms_attempted = 0
    reports_delivered = 0
    alarms_delivered = 0
    cmd_latencies = []
    cmd_errors = 0
    cmd_count = 0
    alarm_raised_at: dict[int, deque] = defaultdict(deque)  # addr -> threshold times
    gw_alarm_info: dict[str, dict] = {}
    inbox_latencies = []
    inbox_count = 0
    path_counts: dict[str, int] = defaultdict(int)
    mac_acked = 0
    mac_attempts_total = 0
    mac_failed = 0
    relay_deliveries = 0
    relayed_bytes = 0
    relay_drops = 0
    sessions_logged_in = 0
    sessions_expired = 0
    state_timeline: dict[str, list] = defaultdict(list)

    for ev in events:
        kind = ev.kind
        if kind == "meta.device":
            device_meta[ev.entity] = dict(ev.detail)
        elif kind == "dev.report":
            reports_attempted += 1
        elif kind == "dev.alarm":
            alarms_attempted += 1
        elif kind == "dev.threshold":
            if ev.detail.get("addr") is not None:
                alarm_raised_at[ev.detail["addr"]].append(ev.t)
        elif kind == "gw.report":
            if ev.detail.get("reason") == 0:
                reports_delivered += 1
        elif kind == "gw.alarm":
            alarms_delivered += 1
            addr = ev.detail.get("addr")
            raised = alarm_raised_at[addr].popleft() if alarm_raised_at[addr] else ev.t
            gw_alarm_info[ev.detail["alarm_id"]] = {"raised_us": raised, "addr": addr}
        elif kind == "client.cmd_ack":
            cmd_count += 1
            if ev.detail.get("status") == "ok":
                cmd_latencies.append(ev.detail["latency_us"])
            else:
                cmd_errors += 1
        elif kind == "client.inbox":
            inbox_count += 1
            info = gw_alarm_info.get(ev.detail.get("alarm_id"))
            if info is not None:
                inbox_latencies.append(ev.t - info["raised_us"])
        elif kind == "path.decision":
            path_counts[ev.detail["decision"]] += 1
        elif kind == "mac.ack":
            mac_acked += 1
            mac_attempts_total += ev.detail.get("attempts", 1)
        elif kind == "mac.fail":
            mac_failed += 1
        elif kind == "relay.deliver":
            relay_deliveries += 1
            relayed_bytes += ev.detail.get("bytes", 0)
        elif kind == "relay.drop":
            relay_drops += 1
        elif kind == "session.login":
            sessions_logged_in += 1
        elif kind == "session.expire":
            sessions_expired += 1
        elif kind == "mac.state":
            state_timeline[ev.entity].append((ev.t, ev.detail["frm"], ev.detail["to"]))

    energy = {}
    battery_estimate = {}
    for entity, meta in sorted(device_meta.items()):
        created = meta.get("created_us", 0)
        durations = {"SLEEP": 0, "RX_LISTEN": 0, "TX": 0}
        state = "RX_LISTEN"
        since = created
        for t, frm, to in state_timeline.get(entity, []):
            durations[frm] += t - since
            state = to
            since = t
        durations[state] += end_us - since
        lifetime_us = end_us - created
        currents = {"SLEEP": meta["sleep_mA"], "RX_LISTEN": meta["rx_mA"],
                    "TX": meta["tx_mA"]}
        consumed_mAh = sum(durations[s] / 3_600_000_000 * currents[s] for s in durations)
        hours = lifetime_us / 3_600_000_000
        energy[entity] = {
            "sleep_s": durations["SLEEP"] / 1e6,
            "rx_listen_s": durations["RX_LISTEN"] / 1e6,
            "tx_s": durations["TX"] / 1e6,
            "consumed_mAh": consumed_mAh,
            "avg_current_mA": consumed_mAh / hours if hours > 0 else 0.0,
        }
        if not meta.get("mains"):
            profile = SleepProfile(
                report_interval_s=meta.get("report_interval_s") or float("inf"),
                poll_interval_s=meta.get("poll_interval_s") or float("inf"),
                report_payload_bytes=meta.get("report_pad_to", 32),
            )
            draw = RadioDraw(capacity_mAh=meta["capacity_mAh"],
                             sleep_mA=meta["sleep_mA"], rx_mA=meta["rx_mA"],
                             tx_mA=meta["tx_mA"], rate_bps=meta.get("rate_bps", 10_000.0))
            hours_est = lifetime_hours(profile, draw)
            years = hours_est / 8766.0
            battery_estimate[entity] = {
                "avg_current_mA": draw.capacity_mAh / hours_est,
                "lifetime_hours": hours_est,
                "lifetime_years": years,
                "in_window": 0.5 <= years <= 2.0,
            }
        else:
            battery_estimate[entity] = {"mains": True, "lifetime_years": None,
                                        "in_window": None}

    attempted = reports_attempted + alarms_attempted
    delivered = reports_delivered + alarms_delivered
    cmd_sorted = sorted(cmd_latencies)
    inbox_sorted = sorted(inbox_latencies)
    report = {
        "duration_s": end_us / 1e6,
        "delivery": {
            "attempted": attempted,
            "delivered": delivered,
            "ratio": (delivered / attempted) if attempted else None,
        },
        "commands": {
            "count": cmd_count,
            "acked": len(cmd_latencies),
            "errors": cmd_errors,
            "latency_p50_s": _sec(_nearest_rank(cmd_sorted, 0.50)),
            "latency_p99_s": _sec(_nearest_rank(cmd_sorted, 0.99)),
            "latency_max_s": _sec(cmd_sorted[-1] if cmd_sorted else None),
        },
        "alarms": {
            "raised": alarms_attempted,
            "delivered_gateway": alarms_delivered,
            "inbox_entries": inbox_count,
            "latency_p50_s": _sec(_nearest_rank(inbox_sorted, 0.50)),
            "latency_max_s": _sec(inbox_sorted[-1] if inbox_sorted else None),
        },
        "energy": energy,
        "battery_estimate": battery_estimate,
        "path_decisions": dict(sorted(path_counts.items())),
        "mac": {
            "acked": mac_acked,
            "failed": mac_failed,
            "avg_attempts": (mac_attempts_total / mac_acked) if mac_acked else None,
        },
        "server": {
            "relay_deliveries": relay_deliveries,
            "relayed_payload_bytes": relayed_bytes,
            "relay_drops": relay_drops,
            "sessions_logged_in": sessions_logged_in,
            "sessions_expired": sessions_expired,
        },
    }
    return report


def _sec(us):
    return us / 1e6 if us is not None else None
