import pytest

from hearth.battery import (
    HOURS_PER_YEAR,
    RadioDraw,
    SleepProfile,
    average_current_mA,
    lifetime_hours,
    lifetime_years,
)
from hearth.kernel import SECOND
from hearth.mac import MacTimings
from hearth.radio import RadioProfile

from conftest import join_now, make_coordinator, make_device, rf_world


def oracle_average_current_default() -> float:
    """Independent per-cycle arithmetic for the default 10s/2s profile."""
    rate = 10_000.0
    t_tx_report_ms = 8 * (11 + 32) / rate * 1000  # 34.4ms
    t_tx_poll_ms = 8 * 11 / rate * 1000           # 8.8ms
    t_ack_ms = 8 * 12 / rate * 1000               # 9.6ms
    wakes_per_cycle = 5                            # 1 report + 4 polls per 10s
    rx_ms = wakes_per_cycle * (15.0 + 1.0 + t_ack_ms)
    tx_ms = t_tx_report_ms + 4 * t_tx_poll_ms
    sleep_ms = 10_000.0 - rx_ms - tx_ms
    ma_ms = tx_ms * 20.0 + rx_ms * 18.5 + sleep_ms * 0.0015
    return ma_ms / 10_000.0


def test_default_profile_within_product_window():
    years = lifetime_years(SleepProfile())
    assert 0.5 <= years <= 2.0


def test_default_profile_matches_independent_oracle():
    mine = average_current_mA(SleepProfile())
    oracle = oracle_average_current_default()
    assert abs(mine - oracle) / oracle < 0.001
    hours = lifetime_hours(SleepProfile())
    assert abs(hours - 2200.0 / oracle) / (2200.0 / oracle) < 0.001


def test_always_on_device_lifetime():
    hours = lifetime_hours(SleepProfile(always_on=True))
    assert abs(hours - 2200.0 / 18.5) < 1e-9
    assert abs(hours - 118.9189189) < 1e-3


def test_sleep_only_upper_bound():
    profile = SleepProfile(report_interval_s=float("inf"), poll_interval_s=float("inf"))
    hours = lifetime_hours(profile)
    assert abs(hours - 2200.0 / 0.0015) < 1e-6


def test_zero_capacity_rejected():
    with pytest.raises(ValueError):
        lifetime_hours(SleepProfile(), RadioDraw(capacity_mAh=0.0))


def test_simulated_ledger_matches_closed_form():
    # quiet network at the battery-model rate; no beacons to keep the channel idle
    from hearth.devices import DeviceSpec, DeviceTerminal, KindRegistry

    sim, medium = rf_world(seed=5)
    profile = RadioProfile(tx_power_dBm=0.0, rate_bps=10_000.0)
    timings = MacTimings()
    from conftest import make_mac
    from hearth.network import Coordinator

    coord_mac = make_mac(sim, medium, "coord", profile=profile, timings=timings)
    coord = Coordinator(sim, medium, coord_mac, beacons=False)
    mac, link = make_device(sim, medium, "dev", 0xF1, coordinator=coord)
    mac.profile = profile
    medium.nodes["dev"].profile = profile
    addr = join_now(sim, link)
    spec = DeviceSpec(device_id=0xF1, kind=KindRegistry().get("temp_humidity"))
    term = DeviceTerminal(sim, mac, link, spec)
    started = sim.now
    term.start()
    consumed0 = mac.ledger.consumed_mAh(started)
    sim.run_until(started + 600 * SECOND)
    consumed = mac.ledger.consumed_mAh(sim.now) - consumed0
    sim_avg = consumed / ((sim.now - started) / 3_600_000_000)
    closed = average_current_mA(SleepProfile())
    assert abs(sim_avg - closed) / closed < 0.02
