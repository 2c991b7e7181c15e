from hypothesis import given
from hypothesis import strategies as st

from tailcopy.simnet import Simulator


def test_zero_delay_fires_before_next_ms():
    sim = Simulator()
    seen = []
    sim.schedule(1, seen.append, "later")
    sim.schedule(0, seen.append, "now")
    sim.run()
    assert seen == ["now", "later"]


def test_same_time_insertion_order():
    sim = Simulator()
    seen = []
    for i in range(5):
        sim.schedule(7, seen.append, i)
    sim.run()
    assert seen == [0, 1, 2, 3, 4]


def test_negative_delay_rejected():
    sim = Simulator()
    try:
        sim.schedule(-1, print)
    except ValueError:
        return
    raise AssertionError("expected ValueError")


@given(st.lists(st.integers(0, 1000), min_size=1, max_size=60))
def test_time_never_goes_backwards(delays):
    sim = Simulator()
    times = []
    for d in delays:
        sim.schedule(d, lambda: times.append(sim.now))
    sim.run()
    assert times == sorted(times)
    assert len(times) == len(delays)


def test_send_latency_and_serialization():
    sim = Simulator()
    link = sim.add_link("A", "B", 10, 1e9)
    got = []
    t = sim.send(link, 1024, lambda: got.append(sim.now))
    sim.run()
    assert t == 10 and got == [10]


def test_send_on_down_link_is_dropped():
    sim = Simulator()
    link = sim.add_link("A", "B", 10, 1e9)
    link.up = False
    got = []
    assert sim.send(link, 10, got.append, 1) is None
    sim.run()
    assert got == []


@given(st.lists(st.integers(1, 200_000), min_size=2, max_size=20))
def test_link_is_fifo(sizes):
    sim = Simulator()
    link = sim.add_link("A", "B", 5, 1e6)
    got = []
    for i, n in enumerate(sizes):
        sim.send(link, n, got.append, i)
        sim.run(until=sim.now + 1)
    sim.run()
    assert got == list(range(len(sizes)))


def test_killed_process_events_dropped_even_after_restart():
    sim = Simulator()
    p = sim.spawn("r1", "A")
    got = []
    sim.schedule(10, got.append, "old", owner=p)
    sim.kill_process(p)
    sim.restart_process(p)
    sim.schedule(10, got.append, "new", owner=p)
    sim.run()
    assert got == ["new"]


def test_kill_hooks_skip_persistent_processes():
    sim = Simulator()
    vol = sim.spawn("cache", "A")
    dur = sim.spawn("log", "A", persistent=True)
    wiped = []
    vol.on_kill.append(lambda: wiped.append("cache"))
    dur.on_kill.append(lambda: wiped.append("log"))
    sim.kill_process(vol)
    sim.kill_process(dur)
    assert wiped == ["cache"]


def test_every_stops_on_false():
    sim = Simulator()
    ticks = []

    def tick():
        ticks.append(sim.now)
        return len(ticks) < 3

    sim.every(50, tick)
    sim.run()
    assert ticks == [50, 100, 150]


def test_same_seed_same_draws():
    a, b = Simulator(seed=11), Simulator(seed=11)
    assert [a.rng.random() for _ in range(5)] == [b.rng.random() for _ in range(5)]
