import pytest
from hypothesis import given
from hypothesis import strategies as st

from tailcopy.durable_log import DurableConfig, DurableLog, DurableThrottled, StaleHandle


def log(**cfg):
    t = [0]
    return DurableLog("A", lambda: t[0], DurableConfig(**cfg)), t


def test_fresh_open_is_empty():
    d, _ = log()
    d.open_writer("/f")
    assert d.poll_length("/f") == 0 and d.exists("/f")


def test_append_and_read_back():
    d, _ = log()
    h = d.open_writer("/f")
    assert d.append(h, b"x" * 10) == 10
    assert d.append(h, b"y" * 20) == 30
    assert d.read("/f", 0, 30) == b"x" * 10 + b"y" * 20
    assert d.read("/f", 25, 100) == b"y" * 5
    assert d.read("/f", 30, 5) == b""


def test_second_open_supersedes_first():
    d, _ = log()
    h1 = d.open_writer("/f")
    d.append(h1, b"abc")
    h2 = d.open_writer("/f")
    with pytest.raises(StaleHandle):
        d.append(h1, b"zzz")
    assert d.read("/f", 0, 10) == b"abc"
    assert d.is_stale(h1) and not d.is_stale(h2)
    d.append(h2, b"d")
    assert d.poll_length("/f") == 4


def test_empty_append_rejected():
    d, _ = log()
    h = d.open_writer("/f")
    with pytest.raises(ValueError):
        d.append(h, b"")


def test_sealed_file_rejects_appends():
    d, _ = log()
    h = d.open_writer("/f")
    d.append(h, b"a")
    d.seal(h)
    assert d.is_sealed("/f")
    with pytest.raises(StaleHandle):
        d.append(h, b"b")


def test_read_throttle():
    d, t = log(max_reads_per_s=2)
    h = d.open_writer("/f")
    d.append(h, b"abc")
    d.read("/f", 0, 1)
    d.read("/f", 1, 1)
    with pytest.raises(DurableThrottled):
        d.read("/f", 2, 1)
    t[0] = 1000
    assert d.read("/f", 2, 1) == b"c"


def test_poll_is_read_only():
    d, _ = log()
    h = d.open_writer("/f")
    d.append(h, b"a" * 100)
    assert [d.poll_length("/f") for _ in range(3)] == [100, 100, 100]
    assert d.total_reads == 0


@given(st.lists(st.binary(min_size=1, max_size=50), min_size=1, max_size=20))
def test_observations_are_prefix_stable(chunks):
    d, _ = log()
    h = d.open_writer("/f")
    seen = []
    for c in chunks:
        d.append(h, c)
        seen.append(d.read("/f", 0, 10_000))
    for a, b in zip(seen, seen[1:]):
        assert b.startswith(a)
    assert seen[-1] == b"".join(chunks)


def test_snapshot_round_trip(tmp_path):
    d, t = log()
    h = d.open_writer("/streams/s/0000/1.data")
    d.append(h, bytes(range(256)))
    d.seal(h)
    d.save(tmp_path)
    back = DurableLog.load(tmp_path, "A", lambda: 0)
    assert back.read("/streams/s/0000/1.data", 0, 1000) == bytes(range(256))
    assert back.is_sealed("/streams/s/0000/1.data")
