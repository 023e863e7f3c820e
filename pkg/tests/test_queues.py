import random
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from p3sync.proto import Frame, MsgType
from p3sync.queues import DeadlockError, FrameQueue, frame_order_key


def push(priority, layer=None, sl=0, it=0):
    return Frame(
        msg_type=MsgType.PUSH,
        priority=priority,
        iteration=it,
        layer_index=layer if layer is not None else priority,
        slice_index=sl,
        payload=b"",
    )


def test_priority_dequeue_order():
    q = FrameQueue(priority_mode=True)
    for p in (2, 0, 1):
        q.put(push(p))
    assert [q.poll().priority for _ in range(3)] == [0, 1, 2]


def test_tie_break_by_slice_index():
    q = FrameQueue(priority_mode=True)
    q.put(push(1, layer=1, sl=1))
    q.put(push(1, layer=1, sl=0))
    assert [q.poll().slice_index for _ in range(2)] == [0, 1]


def test_fifo_mode_arrival_order():
    q = FrameQueue(priority_mode=False)
    for p in (2, 0, 1):
        q.put(push(p))
    assert [q.poll().priority for _ in range(3)] == [2, 0, 1]


def test_poll_blocks_until_put():
    q = FrameQueue()
    out = []

    def consume():
        out.append(q.poll(timeout=5))

    t = threading.Thread(target=consume)
    t.start()
    q.put(push(3))
    t.join(timeout=5)
    assert out and out[0].priority == 3


def test_poll_timeout_raises():
    q = FrameQueue()
    with pytest.raises(DeadlockError):
        q.poll(timeout=0.05)


def test_close_drains_then_none():
    q = FrameQueue()
    q.put(push(5))
    q.close()
    assert q.poll().priority == 5
    assert q.poll() is None
    assert q.poll() is None


@settings(max_examples=200, deadline=None)
@given(
    st.lists(
        st.one_of(
            st.tuples(st.just("put"), st.integers(0, 5), st.integers(0, 3)),
            st.tuples(st.just("poll"), st.just(0), st.just(0)),
        ),
        max_size=40,
    )
)
def test_sequential_linearization(ops):
    # after any interleaving of puts and polls, a poll returns the minimum
    # of what is currently queued
    q = FrameQueue(priority_mode=True)
    mirror = []
    for op, prio, sl in ops:
        if op == "put":
            f = push(prio, sl=sl)
            q.put(f)
            mirror.append(f)
        elif mirror:
            got = q.poll(timeout=1)
            want = min(mirror, key=frame_order_key)
            assert frame_order_key(got) == frame_order_key(want)
            mirror.remove(got)
    assert len(q) == len(mirror)


def test_concurrent_producers_drain_sorted():
    # with all producers joined, every remaining poll sees the full queue, so
    # the drained sequence must be perfectly sorted and complete
    q = FrameQueue(priority_mode=True)
    n_producers, per_producer = 4, 500
    rngs = [random.Random(i) for i in range(n_producers)]
    expected = []

    def producer(i):
        for _ in range(per_producer):
            f = push(rngs[i].randint(0, 9), layer=rngs[i].randint(0, 9), sl=rngs[i].randint(0, 9))
            expected.append(f)
            q.put(f)

    threads = [threading.Thread(target=producer, args=(i,)) for i in range(n_producers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    drained = [q.poll(timeout=1) for _ in range(n_producers * per_producer)]
    keys = [frame_order_key(f) for f in drained]
    assert keys == sorted(keys)
    assert sorted(map(frame_order_key, drained)) == sorted(map(frame_order_key, expected))
    assert len(q) == 0


def test_batch_put_is_atomic_under_concurrency():
    # whenever any element of a batch has been popped, the rest of the batch
    # must already be queued (or popped): a consumer can never observe a
    # partially inserted batch
    q = FrameQueue(priority_mode=True)
    n_batches, batch_size = 60, 8
    popped_by_batch: dict[int, int] = {}

    def producer():
        for b in range(n_batches):
            frames = [push(b % 4, layer=b, sl=s) for s in range(batch_size)]
            q.put_batch(frames)

    total = n_batches * batch_size
    seen = 0
    errors = []
    p = threading.Thread(target=producer)
    p.start()
    while seen < total:
        f = q.poll(timeout=5)
        seen += 1
        b = f.layer_index
        popped_by_batch[b] = popped_by_batch.get(b, 0) + 1
        in_queue = sum(1 for g in q.snapshot() if g.layer_index == b)
        if popped_by_batch[b] + in_queue != batch_size:
            errors.append((b, popped_by_batch[b], in_queue))
    p.join()
    assert not errors, f"partial batches observed: {errors[:5]}"


def test_put_after_close_rejected():
    q = FrameQueue()
    q.close()
    with pytest.raises(RuntimeError):
        q.put(push(0))
