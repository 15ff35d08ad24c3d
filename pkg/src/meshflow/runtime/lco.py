"""Local control objects: event-driven synchronization cells.

Futures, dataflow joins, counting semaphores, ownership mutexes, and
full-empty cells.  Every blocking operation suspends the calling *task*
(cooperatively, via a wake token) rather than its worker; called from
outside the runtime the same operations block the OS thread on an event.
Waiters wake in FIFO order everywhere.

Cells are locality-local.  Remote access goes through parcels targeting a
cell's gid (see the parcel module's set-lco system action).
"""

from __future__ import annotations

import threading
from collections import deque

from ..ids import (
    KIND_DATAFLOW,
    KIND_FE,
    KIND_FUTURE,
    KIND_MUTEX,
    KIND_SEMAPHORE,
    format_gid,
)
from .waiting import WaitSupport


class FutureAlreadySetError(RuntimeError):
    """A future's slot is write-once; the second set is rejected."""


class DataflowInputError(RuntimeError):
    """Duplicate or out-of-range dataflow input write."""


class MutexOwnershipError(RuntimeError):
    """Mutex unlock attempted by a task that does not own it."""


class LcoSupport(WaitSupport):
    """Binds cells to a task runtime (suspension + continuation spawning)."""

    def __init__(self, runtime, gids):
        super().__init__(runtime)
        self.gids = gids

    def new_gid(self, kind):
        return self.gids.allocate(kind)

    def current_task_gid(self):
        task = self.runtime.current_task()
        return task.gid if task is not None else None

    def spawn(self, fn, args=(), priority=0):
        return self.runtime.spawn(fn, args, priority)


class FutureCell:
    """Write-once slot; getters suspend until it is filled.

    An optional continuation ``(fn, fixed_args)`` is spawned as a new task
    when the value arrives, receiving ``fixed_args + (value,)``.
    """

    __slots__ = ("gid", "_support", "_lock", "_full", "_value", "_waiters",
                 "set_count", "_continuation")

    def __init__(self, support, continuation=None):
        self.gid = support.new_gid(KIND_FUTURE)
        self._support = support
        self._lock = threading.Lock()
        self._full = False
        self._value = None
        self._waiters = deque()
        self.set_count = 0
        self._continuation = continuation

    def set(self, value):
        with self._lock:
            if self._full:
                raise FutureAlreadySetError(
                    f"future {format_gid(self.gid)} already set"
                )
            self._full = True
            self._value = value
            self.set_count = 1
            waiters = list(self._waiters)
            self._waiters.clear()
            cont = self._continuation
        for w in waiters:
            w.wake()
        if cont is not None:
            fn, fixed = cont
            self._support.spawn(fn, tuple(fixed) + (value,))

    def get(self):
        with self._lock:
            if self._full:
                return self._value
            waiter = self._support.make_waiter()
            self._waiters.append(waiter)
        self._support.park(waiter)
        return self._value

    def is_set(self):
        return self._full


class DataflowCell:
    """N-input write-once join; fires its continuation exactly once when all
    inputs are full.  The continuation runs as a new task (never inline in
    the final writer) and receives ``fixed_args + (values tuple,)``.
    """

    __slots__ = ("gid", "_support", "_lock", "arity", "_values", "_filled",
                 "_remaining", "fired", "_continuation")

    def __init__(self, support, arity, continuation):
        if arity < 1:
            raise ValueError("dataflow arity must be >= 1")
        self.gid = support.new_gid(KIND_DATAFLOW)
        self._support = support
        self._lock = threading.Lock()
        self.arity = arity
        self._values = [None] * arity
        self._filled = bytearray(arity)
        self._remaining = arity
        self.fired = False
        self._continuation = continuation

    def write(self, index, value):
        with self._lock:
            if not 0 <= index < self.arity:
                raise DataflowInputError(
                    f"dataflow {format_gid(self.gid)}: index {index} out of "
                    f"range 0..{self.arity - 1}"
                )
            if self._filled[index]:
                raise DataflowInputError(
                    f"dataflow {format_gid(self.gid)}: duplicate write to "
                    f"input {index}"
                )
            self._filled[index] = 1
            self._values[index] = value
            self._remaining -= 1
            if self._remaining:
                return
            self.fired = True
            values = tuple(self._values)
            self._values = None
        fn, fixed = self._continuation
        self._support.spawn(fn, tuple(fixed) + (values,))


class SemaphoreCell:
    """Counting semaphore with FIFO baton-passing wakeups."""

    __slots__ = ("gid", "_support", "_lock", "count", "_waiters")

    def __init__(self, support, initial=0):
        if initial < 0:
            raise ValueError("semaphore count must be non-negative")
        self.gid = support.new_gid(KIND_SEMAPHORE)
        self._support = support
        self._lock = threading.Lock()
        self.count = initial
        self._waiters = deque()

    def signal(self, n=1):
        woken = []
        with self._lock:
            for _ in range(n):
                if self._waiters:
                    woken.append(self._waiters.popleft())
                else:
                    self.count += 1
        for w in woken:
            w.wake()

    def wait(self, n=1):
        for _ in range(n):
            with self._lock:
                if self.count > 0:
                    self.count -= 1
                    continue
                waiter = self._support.make_waiter()
                self._waiters.append(waiter)
            self._support.park(waiter)


class MutexCell:
    """Ownership mutex; unlock by a non-owner raises.  FIFO handoff."""

    __slots__ = ("gid", "_support", "_lock", "owner", "_waiters")

    def __init__(self, support):
        self.gid = support.new_gid(KIND_MUTEX)
        self._support = support
        self._lock = threading.Lock()
        self.owner = None
        self._waiters = deque()

    def lock(self):
        me = self._support.current_task_gid()
        if me is None:
            raise RuntimeError("mutex lock outside a task")
        with self._lock:
            if self.owner is None:
                self.owner = me
                return
            waiter = self._support.make_waiter()
            self._waiters.append((waiter, me))
        self._support.park(waiter)
        # Ownership was transferred to us by the unlocker.

    def unlock(self):
        me = self._support.current_task_gid()
        woken = None
        with self._lock:
            if self.owner != me:
                raise MutexOwnershipError(
                    f"mutex {format_gid(self.gid)} unlock by non-owner"
                )
            if self._waiters:
                woken, next_owner = self._waiters.popleft()
                self.owner = next_owner
            else:
                self.owner = None
        if woken is not None:
            woken.wake()


class FullEmptyCell:
    """Full-empty bit with blocking reads and writes.

    ``consuming_reads=True`` (the default) empties the cell on read; with
    ``False`` reads leave it full.  A write while full suspends the writer
    until the cell empties.  Readers and writers each wake FIFO.
    """

    __slots__ = ("gid", "_support", "_lock", "_full", "_value",
                 "consuming_reads", "_readers", "_writers")

    def __init__(self, support, consuming_reads=True):
        self.gid = support.new_gid(KIND_FE)
        self._support = support
        self._lock = threading.Lock()
        self._full = False
        self._value = None
        self.consuming_reads = consuming_reads
        self._readers = deque()
        self._writers = deque()

    def write(self, value):
        with self._lock:
            if not self._full:
                self._install(value)
                woken = self._drain_locked()
            else:
                waiter = self._support.make_waiter()
                self._writers.append((waiter, value))
                woken = None
        if woken is None:
            self._support.park(waiter)
        else:
            for w in woken:
                w.wake()

    def read(self):
        with self._lock:
            if self._full:
                value = self._value
                if self.consuming_reads:
                    self._full = False
                    self._value = None
                    woken = self._drain_locked()
                else:
                    woken = []
            else:
                waiter = self._support.make_waiter()
                self._readers.append(waiter)
                woken = None
        if woken is None:
            self._support.park(waiter)
            return waiter.value
        for w in woken:
            w.wake()
        return value

    def is_full(self):
        return self._full

    def _install(self, value):
        self._full = True
        self._value = value

    def _drain_locked(self):
        """Advance the state machine after a transition; returns waiters to
        wake outside the lock."""
        woken = []
        while True:
            if self._full:
                if not self._readers:
                    break
                reader = self._readers.popleft()
                reader.value = self._value
                woken.append(reader)
                if self.consuming_reads:
                    self._full = False
                    self._value = None
                else:
                    # Non-consuming: every parked reader sees the value.
                    continue
            else:
                if not self._writers:
                    break
                writer, value = self._writers.popleft()
                self._install(value)
                woken.append(writer)
        return woken
