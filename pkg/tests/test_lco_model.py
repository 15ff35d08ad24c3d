"""Exhaustive small-scale interleaving exploration of the real cells.

Scenarios are scripts of up to 3 tasks x 4 blocking operations chosen so
every interleaving can complete (all writes eventually occur).  A controller
gates each scripted operation behind a wake token and explores, depth-first,
every order in which unblocked tasks may issue their next operation.  Any
schedule that strands a waiter is a deadlock in the cells and fails the test.
"""

import threading
import time

from meshflow.ids import GidAllocator
from meshflow.runtime.lco import (
    DataflowCell,
    FullEmptyCell,
    FutureCell,
    LcoSupport,
    SemaphoreCell,
)
from meshflow.runtime.scheduler import SUSPENDED, SchedulerConfig, TaskRuntime

_SETTLE_TIMEOUT = 5.0


class _Script:
    def __init__(self, rt, ops):
        self.rt = rt
        self.ops = ops
        self.gates = [None] * len(ops)
        self.gate_ready = [threading.Event() for _ in ops]
        self.done = [threading.Event() for _ in ops]
        self.finished = threading.Event()
        self.gid = None

    def body(self):
        for j, op in enumerate(self.ops):
            token = self.rt.prepare_suspend()
            self.gates[j] = token
            self.gate_ready[j].set()
            self.rt.suspend(token)
            op()
            self.done[j].set()
        self.finished.set()

    def spawn(self):
        self.gid = self.rt.spawn(self.body)

    def blocked_inside(self, j, rt):
        if self.done[j].is_set():
            return False
        task = rt._suspended.get(self.gid)
        return task is not None and task.state == SUSPENDED


def _settle(rt, script, j):
    """After releasing gate j, wait until the op completed or provably
    blocked inside a cell; a wake from another task's later op may complete
    it asynchronously."""
    deadline = time.monotonic() + _SETTLE_TIMEOUT
    while time.monotonic() < deadline:
        if script.done[j].is_set():
            return "done"
        if script.blocked_inside(j, rt):
            return "blocked"
        time.sleep(0.0002)
    raise AssertionError("op neither completed nor blocked (runaway)")


def _replay(rt, build_scenario, prefix):
    """Runs one schedule prefix on a shared runtime; returns (schedulable
    task ids, unfinished count).  Tasks stranded by dead-end prefixes stay
    parked at their gates and are abandoned."""
    sup = LcoSupport(rt, GidAllocator(0))
    scripts = build_scenario(rt, sup)
    for s in scripts:
        s.spawn()
    triggers = [0] * len(scripts)
    for t in prefix:
        s = scripts[t]
        j = triggers[t]
        if not s.gate_ready[j].wait(_SETTLE_TIMEOUT):
            raise AssertionError("task never reached its gate")
        s.gates[j].trigger()
        triggers[t] += 1
        _settle(rt, s, j)
    choices = []
    unfinished = 0
    for t, s in enumerate(scripts):
        j = triggers[t]
        if j >= len(s.ops):
            # All ops released; the task either finishes (possibly via an
            # in-flight wake) or is provably blocked inside its last op.
            if _settle(rt, s, j - 1) == "done":
                if not s.finished.wait(_SETTLE_TIMEOUT):
                    raise AssertionError("final op done but task unfinished")
            else:
                unfinished += 1
            continue
        if s.finished.is_set():
            continue
        unfinished += 1
        if j > 0 and _settle(rt, s, j - 1) == "blocked":
            continue  # blocked inside the previous op: not schedulable
        if not s.gate_ready[j].wait(_SETTLE_TIMEOUT):
            raise AssertionError("task never reached its gate")
        choices.append(t)
    return choices, unfinished


def _explore(build_scenario):
    """DFS over all schedules; returns the number of complete schedules."""
    complete = 0
    stack = [()]
    rt = TaskRuntime(SchedulerConfig(workers=1)).start()
    try:
        while stack:
            prefix = stack.pop()
            choices, unfinished = _replay(rt, build_scenario, prefix)
            if unfinished == 0:
                complete += 1
                continue
            assert choices, (
                f"deadlock: schedule {prefix} strands {unfinished} task(s)"
            )
            for t in choices:
                stack.append(prefix + (t,))
    finally:
        rt.shutdown()
    return complete


def test_future_semaphore_handshake_all_interleavings():
    def build(rt, sup):
        f = FutureCell(sup)
        sem = SemaphoreCell(sup, initial=0)
        out = []
        t1 = _Script(rt, [lambda: out.append(f.get()), sem.signal])
        t2 = _Script(rt, [lambda: f.set(1), sem.wait])
        return [t1, t2]

    assert _explore(build) >= 2


def test_fe_write_read_pairs_all_interleavings():
    # Each task writes before it reads, so writes are always issuable; the
    # premise "all writes eventually occur" holds on every schedule.
    def build(rt, sup):
        fe = FullEmptyCell(sup)
        got = []
        t1 = _Script(rt, [lambda: fe.write(1), lambda: got.append(fe.read())])
        t2 = _Script(rt, [lambda: fe.write(2), lambda: got.append(fe.read())])
        return [t1, t2]

    assert _explore(build) >= 2


def test_three_task_dataflow_join_all_interleavings():
    def build(rt, sup):
        sem = SemaphoreCell(sup, initial=0)
        d = DataflowCell(sup, 3, (lambda vals: sem.signal(2), ()))
        t1 = _Script(rt, [lambda: d.write(0, "a"), sem.wait])
        t2 = _Script(rt, [lambda: d.write(1, "b"), sem.wait])
        t3 = _Script(rt, [lambda: d.write(2, "c")])
        return [t1, t2, t3]

    assert _explore(build) >= 6


def test_two_futures_cross_all_interleavings():
    def build(rt, sup):
        fa = FutureCell(sup)
        fb = FutureCell(sup)
        out = []
        t1 = _Script(rt, [lambda: fa.set(1), lambda: out.append(fb.get())])
        t2 = _Script(rt, [lambda: fb.set(2), lambda: out.append(fa.get())])
        return [t1, t2]

    assert _explore(build) >= 6
