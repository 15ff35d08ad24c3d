import itertools
import random
import threading
import time

import pytest

from meshflow.ids import GidAllocator, KIND_FUTURE, gid_kind
from meshflow.runtime.lco import (
    DataflowCell,
    DataflowInputError,
    FullEmptyCell,
    FutureAlreadySetError,
    FutureCell,
    LcoSupport,
    MutexCell,
    MutexOwnershipError,
    SemaphoreCell,
)
from meshflow.runtime.scheduler import POLICY_LOCAL, SchedulerConfig, TaskRuntime


@pytest.fixture
def rig():
    rt = TaskRuntime(SchedulerConfig(workers=2, policy=POLICY_LOCAL)).start()
    support = LcoSupport(rt, GidAllocator(0))
    yield rt, support
    rt.shutdown()


def run_tasks(rt, *fns, timeout=10):
    for fn in fns:
        rt.spawn(fn)
    return rt.quiesce(timeout=timeout)


# -- futures -------------------------------------------------------------------


def test_future_set_then_get(rig):
    rt, sup = rig
    f = FutureCell(sup)
    out = []
    f.set(42)
    run_tasks(rt, lambda: out.append(f.get()))
    assert out == [42]
    assert gid_kind(f.gid) == KIND_FUTURE


def test_future_broadcast_to_ten_getters(rig):
    rt, sup = rig
    f = FutureCell(sup)
    out = []
    for _ in range(10):
        rt.spawn(lambda: out.append(f.get()))
    time.sleep(0.05)
    rt.spawn(lambda: f.set(7))
    rt.quiesce(timeout=10)
    assert out == [7] * 10


def test_future_double_set_rejected(rig):
    rt, sup = rig
    f = FutureCell(sup)
    f.set("first")
    with pytest.raises(FutureAlreadySetError):
        f.set("second")
    assert f.get() == "first"


def test_future_get_after_set_no_suspension(rig):
    rt, sup = rig
    f = FutureCell(sup)
    f.set(1)
    before = rt.stats().suspensions
    run_tasks(rt, lambda: f.get())
    assert rt.stats().suspensions == before


def test_future_get_before_set_suspends_once(rig):
    rt, sup = rig
    f = FutureCell(sup)
    before = rt.stats().suspensions
    rt.spawn(lambda: f.get())
    time.sleep(0.05)
    f.set(3)
    rt.quiesce(timeout=5)
    assert rt.stats().suspensions == before + 1


def test_future_get_from_outside_runtime(rig):
    rt, sup = rig

    def producer():
        time.sleep(0.02)
        f.set(99)

    f = FutureCell(sup)
    rt.spawn(producer)
    assert f.get() == 99  # main thread blocks on an event, not a worker


def test_future_continuation_spawned_on_set(rig):
    rt, sup = rig
    got = []
    f = FutureCell(sup, continuation=(lambda tag, v: got.append((tag, v)),
                                      ("cont",)))
    f.set(11)
    rt.quiesce(timeout=5)
    assert got == [("cont", 11)]


# -- dataflow -------------------------------------------------------------------


def test_dataflow_fires_once_after_last_write(rig):
    rt, sup = rig
    fired = []
    d = DataflowCell(sup, 3, (lambda vals: fired.append(vals), ()))
    d.write(2, "c")
    d.write(0, "a")
    assert fired == []
    assert not d.fired
    d.write(1, "b")
    rt.quiesce(timeout=5)
    assert fired == [("a", "b", "c")]
    assert d.fired


def test_dataflow_arity_one_fires_immediately(rig):
    rt, sup = rig
    fired = []
    d = DataflowCell(sup, 1, (lambda vals: fired.append(vals), ()))
    d.write(0, 5)
    rt.quiesce(timeout=5)
    assert fired == [(5,)]


def test_dataflow_duplicate_write_rejected(rig):
    rt, sup = rig
    d = DataflowCell(sup, 2, (lambda vals: None, ()))
    d.write(0, 1)
    with pytest.raises(DataflowInputError):
        d.write(0, 2)
    with pytest.raises(DataflowInputError):
        d.write(5, 1)


def test_dataflow_chain_of_64_fires_in_order(rig):
    rt, sup = rig
    n = 64
    log = []
    cells = []

    def fire(k, vals):
        log.append(k)
        if k + 1 < n:
            cells[k + 1].write(0, vals[0] + 1)

    for k in range(n):
        cells.append(DataflowCell(sup, 1, (fire, (k,))))
    cells[0].write(0, 0)
    rt.quiesce(timeout=10)
    assert log == list(range(n))


def test_dataflow_single_firing_across_random_write_orders(rig):
    rt, sup = rig
    rng = random.Random(7)
    fired = itertools.count()
    trials = 2000
    for _ in range(trials):
        d = DataflowCell(sup, 4, (lambda vals: next(fired), ()))
        order = [0, 1, 2, 3]
        rng.shuffle(order)
        for idx in order:
            rt.spawn(d.write, (idx, idx))
        rt.quiesce(timeout=10)
    assert next(fired) == trials


# -- semaphores / mutexes ----------------------------------------------------------


def test_semaphore_wait_then_signal(rig):
    rt, sup = rig
    sem = SemaphoreCell(sup, initial=0)
    log = []

    def waiter():
        sem.wait()
        log.append("through")

    rt.spawn(waiter)
    time.sleep(0.02)
    assert log == []
    rt.spawn(sem.signal)
    rt.quiesce(timeout=5)
    assert log == ["through"]


def test_semaphore_count_never_negative(rig):
    rt, sup = rig
    sem = SemaphoreCell(sup, initial=3)
    for _ in range(50):
        rt.spawn(sem.wait)
        rt.spawn(sem.signal)
    rt.quiesce(timeout=10)
    assert sem.count >= 0
    with pytest.raises(ValueError):
        SemaphoreCell(sup, initial=-1)


def test_mutex_mutual_exclusion_exact_count(rig):
    rt, sup = rig
    m = MutexCell(sup)
    state = {"n": 0}

    def bump():
        for _ in range(100):
            m.lock()
            v = state["n"]
            state["n"] = v + 1
            m.unlock()

    for _ in range(100):
        rt.spawn(bump)
    rt.quiesce(timeout=60)
    assert state["n"] == 10_000


def test_mutex_unlock_by_non_owner_rejected(rig):
    rt, sup = rig
    m = MutexCell(sup)
    errors = []

    def locker():
        m.lock()
        time.sleep(0.05)
        m.unlock()

    def intruder():
        time.sleep(0.02)
        try:
            m.unlock()
        except MutexOwnershipError as exc:
            errors.append(exc)

    run_tasks(rt, locker, intruder)
    assert len(errors) == 1


# -- full-empty cells ------------------------------------------------------------------


def test_fe_write_read_roundtrip(rig):
    rt, sup = rig
    fe = FullEmptyCell(sup)
    out = []
    fe.write(10)
    assert fe.is_full()
    run_tasks(rt, lambda: out.append(fe.read()))
    assert out == [10]
    assert not fe.is_full()


def test_fe_nonconsuming_read_keeps_full(rig):
    rt, sup = rig
    fe = FullEmptyCell(sup, consuming_reads=False)
    fe.write(5)
    out = []
    run_tasks(rt, lambda: out.append(fe.read()),
              lambda: out.append(fe.read()))
    assert out == [5, 5]
    assert fe.is_full()


def test_fe_write_while_full_suspends_writer(rig):
    rt, sup = rig
    fe = FullEmptyCell(sup)
    log = []

    def writer():
        fe.write(1)
        fe.write(2)  # blocks until the first value is consumed
        log.append("second-write-done")

    def reader():
        time.sleep(0.05)
        log.append(("read", fe.read()))

    run_tasks(rt, writer, reader)
    assert log[0] == ("read", 1)
    assert "second-write-done" in log
    assert fe.read() == 2


def test_fe_ping_pong_exact_alternation(rig):
    rt, sup = rig
    ping = FullEmptyCell(sup)
    pong = FullEmptyCell(sup)
    rounds = 1000
    log = []

    def left():
        for i in range(rounds):
            ping.write(i)
            log.append(("L", pong.read()))

    def right():
        for i in range(rounds):
            v = ping.read()
            log.append(("R", v))
            pong.write(v)

    run_tasks(rt, left, right, timeout=60)
    expected = []
    for i in range(rounds):
        expected.append(("R", i))
        expected.append(("L", i))
    assert log == expected


# -- scheduler interaction ----------------------------------------------------------------


def test_blocked_getter_consumes_no_worker():
    rt = TaskRuntime(SchedulerConfig(workers=1)).start()
    sup = LcoSupport(rt, GidAllocator(0))
    f = FutureCell(sup)
    order = []

    def getter():
        f.get()
        order.append("getter")

    rt.spawn(getter)
    for i in range(100):
        rt.spawn(order.append, (i,))
    time.sleep(0.3)
    f.set(None)
    rt.quiesce(timeout=10)
    rt.shutdown()
    assert order.index("getter") == 100  # all runnable tasks finished first


def test_linearizable_counters_under_stress():
    rt = TaskRuntime(SchedulerConfig(workers=16, policy=POLICY_LOCAL)).start()
    sup = LcoSupport(rt, GidAllocator(0))
    sem = SemaphoreCell(sup, initial=0)
    fe = FullEmptyCell(sup)
    fe.write(0)

    def fe_bump():
        v = fe.read()
        fe.write(v + 1)

    for _ in range(400):
        rt.spawn(fe_bump)
        rt.spawn(sem.signal)
    for _ in range(400):
        rt.spawn(sem.wait)
    rt.quiesce(timeout=60)
    rt.shutdown()
    assert fe.read() == 400  # no torn or lost increments
    assert sem.count == 0
