import pytest

from hearth.kernel import PastTimeError, Simulator


def test_event_at_zero_fires_first():
    sim = Simulator(seed=0)
    order = []
    sim.schedule_at(5, lambda: order.append("later"))
    sim.schedule_at(0, lambda: order.append("first"))
    sim.run_until(10)
    assert order == ["first", "later"]


def test_tie_break_is_insertion_order():
    sim = Simulator(seed=0)
    order = []
    sim.schedule_at(5, lambda: order.append("A"))
    sim.schedule_at(5, lambda: order.append("B"))
    sim.run_until(5)
    assert order == ["A", "B"]


def test_schedule_in_past_rejected():
    sim = Simulator(seed=0)
    sim.run_until(10)
    with pytest.raises(PastTimeError):
        sim.schedule_at(3, lambda: None)


def test_run_until_empty_queue_advances_clock():
    sim = Simulator(seed=0)
    trace = sim.run_until(100)
    assert sim.now == 100
    assert len(trace) == 0


def test_run_until_boundary_inclusive():
    sim = Simulator(seed=0)
    for t in (1, 2, 3):
        sim.schedule_at(t, lambda t=t: sim.emit("n", "tick", at=t))
    trace = sim.run_until(2)
    assert [e.detail["at"] for e in trace] == [1, 2]
    assert sim.now == 2


def test_replay_determinism():
    def scenario(seed):
        sim = Simulator(seed=seed)

        def hop(depth):
            if depth == 0:
                return
            delay = sim.rng.draw_range(1, 50)
            sim.emit("walker", "hop", depth=depth, delay=delay)
            sim.schedule_in(delay, lambda: hop(depth - 1))

        hop(200)
        sim.run_until(100_000)
        return sim.trace.sha256()

    assert scenario(7) == scenario(7)
    assert scenario(7) != scenario(8)


def test_no_event_loss():
    sim = Simulator(seed=0)
    fired = []
    for t in range(50):
        sim.schedule_at(t * 10, lambda t=t: fired.append(t))
    sim.run_until(490)
    assert len(fired) == 50
    assert sim.stats["fired"] == 50


def test_cancel_prevents_firing():
    sim = Simulator(seed=0)
    fired = []
    h = sim.schedule_at(5, lambda: fired.append("x"))
    sim.cancel(h)
    sim.run_until(10)
    assert fired == []


def test_clock_monotone_across_callbacks():
    sim = Simulator(seed=0)
    seen = []
    sim.schedule_at(1, lambda: seen.append(sim.now))
    sim.schedule_at(1, lambda: sim.schedule_in(0, lambda: seen.append(sim.now)))
    sim.schedule_at(2, lambda: seen.append(sim.now))
    sim.run_until(5)
    assert seen == sorted(seen)
