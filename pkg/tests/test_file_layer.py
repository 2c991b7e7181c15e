import random
from collections import deque

import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import codec_roundtrip, delayed_read_oracle
from tailcopy.durable_log import DurableLog
from tailcopy.file_layer import (ChunkGeometry, ChunkWritePlan, DelayedReadState, FileMeta,
                                 IndexRecord, INDEX_RECORD_SIZE, LengthPoller, WriterState,
                                 chunk_span, read_meta, read_range_cached, shadow_write,
                                 should_read_from_durable, update_meta)
from tailcopy.kv_cache import CacheInstance, chunk_key, meta_key

C = 4096


def env():
    t = [0]
    clock = lambda: t[0]
    cache = CacheInstance("d", clock, random.Random(3))
    meta = CacheInstance("m", clock, random.Random(4))
    dur = DurableLog("A", clock)
    return cache, meta, dur, t


# -- chunk arithmetic ------------------------------------------------------------

def test_chunk_span_examples():
    assert chunk_span(0, 10000) == [(0, 0, 4096), (1, 0, 4096), (2, 0, 1808)]
    assert chunk_span(4096, 1) == [(1, 0, 1)]
    assert chunk_span(5, 0) == []
    with pytest.raises(ValueError):
        ChunkGeometry(0)


@given(st.integers(0, 50_000), st.integers(0, 50_000), st.integers(1, 5000))
def test_chunk_span_covers_exactly(offset, length, size):
    spans = ChunkGeometry(size).chunk_span(offset, length)
    pos = offset
    for seq, a, b in spans:
        assert seq * size + a == pos and 0 <= a < b <= size
        pos += b - a
    assert pos == offset + length
    assert [s for s, _, _ in spans] == sorted({s for s, _, _ in spans})


def test_meta_and_index_encoding():
    for m in (FileMeta(), FileMeta(10, 20), FileMeta(5, 7, 7)):
        assert FileMeta.decode(m.encode()) == m
    r = IndexRecord(123, 45, 6789, 10)
    assert len(r.encode()) == INDEX_RECORD_SIZE == 28
    assert IndexRecord.decode(r.encode()) == r


# -- write plan ------------------------------------------------------------------------

def test_partial_chunk_rewritten_from_start():
    plan = ChunkWritePlan(C)
    truth = bytes(random.Random(0).randrange(256) for _ in range(2100))
    (first,) = plan.add(0, truth[:2000])
    assert (first.seq, len(first.data)) == (0, 2000)
    assert plan.add(2000, truth[2000:]) == []  # serialized behind the in-flight put
    (second,) = plan.on_ack(first, 3)
    assert second.seq == 0 and second.data == truth[:2100]


def test_large_write_splits_into_complete_and_partial():
    plan = ChunkWritePlan(C)
    first = plan.add(0, bytes(2000))
    plan.on_ack(first[0], 3)
    reqs = plan.add(2000, bytes(9000))
    sizes = {r.seq: len(r.data) for r in reqs}
    assert sizes == {0: 4096, 1: 4096, 2: 11000 % 4096}


def test_out_of_order_deltas_keep_chunk_prefix():
    """A later, larger write arrives before an earlier small one inside chunk 0."""
    truth = bytes(random.Random(1).randrange(256) for _ in range(4 * C - 100))
    plan = ChunkWritePlan(C)
    w1 = (0, truth[:300])
    w2 = (300, truth[300:])
    reqs = plan.add(*w2)
    assert sorted(r.seq for r in reqs) == [1, 2, 3]
    assert len([r for r in reqs if r.seq == 3][0].data) == len(truth) - 3 * C
    # chunk 0 has no prefix yet, so nothing may be written to it
    assert plan.pointer == 0
    (c0,) = plan.add(*w1)
    assert c0.seq == 0 and c0.data == truth[:C]
    for r in reqs + [c0]:
        plan.on_ack(r, 3)
    assert plan.pointer == len(truth)


def test_pointer_waits_for_acks():
    plan = ChunkWritePlan(C)
    reqs = plan.add(0, bytes(3 * C))
    assert plan.pointer == 0
    plan.on_ack(reqs[1], 3)
    assert plan.pointer == 0
    plan.on_ack(reqs[0], 3)
    assert plan.pointer == 2 * C
    plan.on_ack(reqs[2], 3)
    assert plan.pointer == 3 * C and plan.idle()


def test_failed_put_is_retried_and_holds_pointer():
    plan = ChunkWritePlan(C)
    (r,) = plan.add(0, bytes(100))
    retry = plan.on_ack(r, 0)
    assert plan.failed and plan.pointer == 0
    assert retry and retry[0].data == bytes(100)
    plan.on_ack(retry[0], 2)
    assert plan.pointer == 100


def test_repeat_flush_of_partial_chunk_bumps_version():
    cache, meta, dur, t = env()
    ws = WriterState("/f", None, ChunkWritePlan(C))
    versions = []
    for piece in (b"a" * 10, b"b" * 10):
        for req in shadow_write(ws, piece):
            cache.put(chunk_key("/f", req.seq), req.data)
            ws.plan.on_ack(req, 3)
        versions.append(cache.get_consistent(chunk_key("/f", 0)).value.version)
    assert versions[1] > versions[0]
    assert cache.get_consistent(chunk_key("/f", 0)).value.data == b"a" * 10 + b"b" * 10
    assert ws.last_partial == (0, 20)


def test_plan_must_start_on_boundary():
    with pytest.raises(ValueError):
        ChunkWritePlan(C, 10)


@given(st.integers(0, 2**32), st.sampled_from([1, 2, 3, 4, 7, 16]), st.integers(1, 120))
def test_codec_round_trip_with_prefix_property(seed, chunk, total):
    ok, why = codec_roundtrip(random.Random(seed), chunk, total)
    assert ok, why


def test_codec_mutations_are_caught():
    assert any(not codec_roundtrip(random.Random(i), 4, 40, prefix_rule=False)[0] for i in range(20))
    assert any(not codec_roundtrip(random.Random(i), 4, 40, publish_before_ack=True)[0]
               for i in range(20))


# -- reads -----------------------------------------------------------------------------

def _store(cache, dur, path, data, skip=(), short=None):
    h = dur.open_writer(path)
    dur.append(h, data)
    for seq, a, b in chunk_span(0, len(data)):
        if seq in skip:
            continue
        cache.put(chunk_key(path, seq), data[seq * C: seq * C + b])
    if short is not None:
        seq, n = short
        ids = cache.replica_ids(chunk_key(path, seq))
        # leave one lagging replica with a short value
        cache.put(chunk_key(path, seq), data[seq * C: seq * C + n], replicas=ids[:1],
                  version=0)


def test_all_cached_means_no_durable_reads():
    cache, _, dur, _ = env()
    data = bytes(random.Random(2).randrange(256) for _ in range(3 * C + 10))
    _store(cache, dur, "/f", data)
    out = read_range_cached(cache, dur, "/f", 0, len(data))
    assert out.data == data and out.stats.durable_reads == 0


def test_lagging_replica_escalates_to_consistent():
    cache, _, dur, _ = env()
    data = bytes(random.Random(2).randrange(256) for _ in range(C))
    path = "/lag"
    h = dur.open_writer(path)
    dur.append(h, data)
    k = chunk_key(path, 0)
    ids = cache.replica_ids(k)
    cache.put(k, data[:2000], replicas=ids[:1])
    cache.put(k, data, replicas=ids[1:])
    escalations = 0
    for _ in range(40):
        out = read_range_cached(cache, None, path, 0, C)
        assert out.data == data
        escalations += out.stats.consistent
    assert escalations > 0


def test_missing_chunks_use_one_combined_durable_read():
    cache, _, dur, _ = env()
    data = bytes(random.Random(5).randrange(256) for _ in range(6 * C))
    _store(cache, dur, "/g", data, skip={3, 5})
    out = read_range_cached(cache, dur, "/g", 0, len(data))
    assert out.data == data
    assert out.stats.durable_reads == 1
    assert out.stats.durable_bytes == 3 * C
    assert out.stats.cache_bytes == 4 * C


def test_read_is_short_without_durable():
    cache, _, dur, _ = env()
    data = bytes(2 * C)
    _store(cache, dur, "/h", data, skip={1})
    assert read_range_cached(cache, None, "/h", 0, 2 * C).data == data[:C]


# -- lengths -----------------------------------------------------------------------------

def test_update_meta_grow_only():
    _, meta, _, _ = env()
    update_meta(meta, "/f", cache_len=100)
    update_meta(meta, "/f", cache_len=50, grow_only=True)
    assert read_meta(meta, "/f").cache_len == 100
    update_meta(meta, "/f", cache_len=50)
    assert read_meta(meta, "/f").cache_len == 50


def test_poller_batches_and_falls_back_to_durable():
    _, meta, dur, t = env()
    paths = [f"/f{i}" for i in range(8)]
    for i, p in enumerate(paths):
        h = dur.open_writer(p)
        dur.append(h, bytes(i + 1))
        update_meta(meta, p, cache_len=i, durable_len=i + 1)
    poller = LengthPoller(meta, dur, lambda: t[0])
    got = poller.poll_lengths(paths)
    assert [got[p].cache_len for p in paths] == list(range(8))
    assert poller.poll_lengths(paths) == got
    for rid in meta.ring_members():
        meta.kill_replica(rid)
    h = dur.open_writer(paths[0])
    dur.append(h, bytes(50))
    t[0] = 1000
    m = poller.poll_lengths(paths)[paths[0]]
    assert m.durable_len == 51 and m.cache_len == 0 and not m.from_cache


# -- delayed durable reads -------------------------------------------------------------

def test_delayed_read_examples():
    st_ = DelayedReadState(1000)
    assert should_read_from_durable(st_, 50, 100, 0) is False
    assert should_read_from_durable(st_, 50, 120, 1500) is True
    st_ = DelayedReadState(1000)
    assert should_read_from_durable(st_, 50, 100, 0) is False
    assert should_read_from_durable(st_, 120, 130, 800) is False


def test_caught_up_cache_never_reads_durable():
    st_ = DelayedReadState(1000)
    assert not any(should_read_from_durable(st_, n, n, t) for t, n in enumerate(range(0, 5000, 7)))


@given(st.lists(st.tuples(st.integers(0, 300), st.integers(0, 400), st.integers(0, 300)),
                max_size=60),
       st.integers(0, 600))
def test_delayed_read_matches_oracle(steps, max_delay):
    ours = DelayedReadState(max_delay)
    ref: list = []
    now = 0
    for dt, cache, durable in steps:
        now += dt
        assert should_read_from_durable(ours, cache, durable, now) == \
            delayed_read_oracle(ref, cache, durable, now, max_delay)
        assert list(ours.size_record) == ref
