"""Cooperative user-level task scheduler.

Tasks are stackful greenlets multiplexed onto a fixed pool of OS worker
threads.  A task runs until it returns or cooperatively suspends; suspension
parks only the task, never its worker.  Two scheduling policies are provided:
a single global FIFO queue, and per-worker priority queues with random-victim
work stealing (owner pops LIFO, thieves steal FIFO from the opposite end).

greenlets are bound to the thread that created them, so a task is pinned to
the worker that first ran it: wakeups re-enqueue the task on its owning
worker's resume queue and are never stolen.  Fresh (never-started) tasks may
be claimed or stolen by any worker.
"""

from __future__ import annotations

import random
import threading
import time
from collections import deque
from dataclasses import dataclass, field

from greenlet import greenlet

from ..ids import KIND_TASK, GidAllocator, format_gid

PENDING = 0
RUNNING = 1
SUSPENDED = 2
TERMINATED = 3

POLICY_GLOBAL = "global-queue"
POLICY_LOCAL = "local-priority-stealing"

#: Documented minimum per-task stack budget in bytes.  Stacks are on-demand
#: (greenlet grows them as needed); the budget is validated, not preallocated.
MIN_STACK_BUDGET = 32 * 1024

_PARK_TIMEOUT = 0.002


class RuntimeShutDownError(RuntimeError):
    """Operation rejected because the runtime has been shut down."""


class WakeTokenReusedError(RuntimeError):
    """A wake token was triggered more than once."""


class QuiesceTimeoutError(RuntimeError):
    def __init__(self, suspended_gids, outstanding):
        self.suspended_gids = list(suspended_gids)
        self.outstanding = outstanding
        names = ", ".join(format_gid(g) for g in self.suspended_gids) or "none"
        super().__init__(
            f"quiesce timed out with {outstanding} task(s) outstanding; "
            f"suspended: {names}"
        )


class SuspendOutsideTaskError(RuntimeError):
    """suspend/prepare_suspend called from outside a running task."""


@dataclass
class SchedulerConfig:
    workers: int = 1
    policy: str = POLICY_GLOBAL
    stack_budget: int = 64 * 1024
    seed: int = 0

    def validate(self) -> None:
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.policy not in (POLICY_GLOBAL, POLICY_LOCAL):
            raise ValueError(f"unknown scheduling policy: {self.policy!r}")
        if self.stack_budget < MIN_STACK_BUDGET:
            raise ValueError(
                f"stack_budget {self.stack_budget} below documented minimum "
                f"{MIN_STACK_BUDGET}"
            )


@dataclass
class RuntimeStats:
    tasks_spawned: int = 0
    tasks_completed: int = 0
    steals: int = 0
    suspensions: int = 0
    busy_s: list = field(default_factory=list)
    completed_per_worker: list = field(default_factory=list)

    def as_text(self) -> str:
        lines = [
            f"tasks_spawned={self.tasks_spawned}",
            f"tasks_completed={self.tasks_completed}",
            f"steals={self.steals}",
            f"suspensions={self.suspensions}",
        ]
        for i, b in enumerate(self.busy_s):
            lines.append(f"busy_s[{i}]={b:.6f}")
        for i, c in enumerate(self.completed_per_worker):
            lines.append(f"completed[{i}]={c}")
        return "\n".join(lines)


class TaskDescriptor:
    __slots__ = (
        "gid", "fn", "args", "priority", "state",
        "worker", "glet", "lock", "early_wake",
    )

    def __init__(self, gid, fn, args, priority):
        self.gid = gid
        self.fn = fn
        self.args = args
        self.priority = priority
        self.state = PENDING
        self.worker = -1
        self.glet = None
        self.lock = None
        self.early_wake = False

    def ensure_lock(self):
        # Benign race: two threads may both allocate; one wins via setattr
        # ordering under the GIL.  Only the suspend path ever calls this
        # before publishing the token, so in practice it is single-threaded.
        if self.lock is None:
            self.lock = threading.Lock()
        return self.lock


class WakeToken:
    """One-shot resume handle for a suspended task.

    ``trigger`` moves the task back to pending exactly once; a second trigger
    raises, a trigger after the task terminated is a no-op.
    """

    __slots__ = ("_task", "_runtime", "fired")

    def __init__(self, runtime, task):
        self._runtime = runtime
        self._task = task
        self.fired = False

    def trigger(self) -> bool:
        task = self._task
        with task.lock:
            if self.fired:
                raise WakeTokenReusedError(
                    f"wake token for {format_gid(task.gid)} already triggered"
                )
            self.fired = True
            state = task.state
            if state == TERMINATED:
                return False
            if state == SUSPENDED:
                task.state = PENDING
                self._runtime._enqueue_resume(task)
                return True
            # Task has not yet switched out: flag it so suspend() returns
            # immediately instead of parking.
            task.early_wake = True
            return True


class _Worker(threading.Thread):
    def __init__(self, runtime, idx, seed):
        super().__init__(name=f"meshflow-worker-{idx}", daemon=True)
        self.runtime = runtime
        self.idx = idx
        self.rng = random.Random(seed)
        self.resume = deque()
        self.hi = deque()
        self.norm = deque()
        self.cond = threading.Condition()
        self.parked = False
        self.completed = 0
        self.steals = 0
        self.suspensions = 0
        self.busy = 0.0
        self.current = None
        self.sched_glet = None

    # -- queue plumbing ----------------------------------------------------

    def _pop_local(self):
        rt = self.runtime
        try:
            return self.resume.popleft()
        except IndexError:
            pass
        if rt.policy == POLICY_GLOBAL:
            try:
                return rt.gq_hi.popleft()
            except IndexError:
                pass
            try:
                return rt.gq_norm.popleft()
            except IndexError:
                pass
        else:
            try:
                return self.hi.pop()
            except IndexError:
                pass
            try:
                return self.norm.pop()
            except IndexError:
                pass
        return None

    def _steal(self):
        rt = self.runtime
        workers = rt.workers
        n = len(workers)
        if n <= 1:
            return None
        # Random victim, up to workers-1 attempts, opposite queue end from
        # the owner.
        start = self.rng.randrange(n)
        for k in range(n - 1):
            v = workers[(start + k) % n]
            if v is self:
                continue
            try:
                t = v.hi.popleft()
            except IndexError:
                try:
                    t = v.norm.popleft()
                except IndexError:
                    continue
            self.steals += 1
            return t
        return None

    def _next_task(self):
        t = self._pop_local()
        if t is None and self.runtime.policy == POLICY_LOCAL:
            t = self._steal()
        return t

    def _park(self):
        rt = self.runtime
        cond = self.cond if rt.policy == POLICY_LOCAL else rt.gq_cond
        with cond:
            self.parked = True
            if rt._stop or self._has_work():
                self.parked = False
                return
            cond.wait(_PARK_TIMEOUT)
            self.parked = False

    def _has_work(self):
        if self.resume:
            return True
        rt = self.runtime
        if rt.policy == POLICY_GLOBAL:
            return bool(rt.gq_hi) or bool(rt.gq_norm)
        return bool(self.hi) or bool(self.norm)

    # -- execution ---------------------------------------------------------

    def run(self):
        self.runtime._tls.worker = self
        self.sched_glet = greenlet.getcurrent()
        rt = self.runtime
        spins = 0
        while True:
            task = self._next_task()
            if task is None:
                if rt._stop:
                    break
                spins += 1
                if spins < 20:
                    time.sleep(0)
                else:
                    self._park()
                continue
            spins = 0
            self._run_task(task)

    def _run_task(self, task):
        task.state = RUNNING
        task.worker = self.idx
        self.current = task
        t0 = time.perf_counter()
        if task.glet is None:
            task.glet = greenlet(self.runtime._task_entry)
            task.glet.switch(task)
        else:
            task.glet.switch()
        self.busy += time.perf_counter() - t0
        self.current = None
        if task.glet.dead:
            task.state = TERMINATED
            task.glet = None
            self.completed += 1
            rt = self.runtime
            if rt._quiesce_waiting:
                with rt._quiesce_cond:
                    rt._quiesce_cond.notify_all()
        # else: the task suspended; bookkeeping already done in suspend().


class TaskRuntime:
    """Fixed worker pool executing cooperative tasks.

    All public operations are callable from any task or from outside the
    runtime.  ``spawn`` never blocks the caller.
    """

    def __init__(self, config: SchedulerConfig | None = None, locality: int = 0,
                 gid_allocator: GidAllocator | None = None):
        self.config = config or SchedulerConfig()
        self.config.validate()
        self.policy = self.config.policy
        self._gids = gid_allocator or GidAllocator(locality)
        self._tls = threading.local()
        self.workers: list[_Worker] = []
        self.gq_hi = deque()
        self.gq_norm = deque()
        self.gq_cond = threading.Condition()
        self._stop = False
        self._started = False
        self._shut_down = False
        self._spawned_external = 0
        self._spawned_lock = threading.Lock()
        self._spawned_by_worker = None
        self._quiesce_cond = threading.Condition()
        self._quiesce_waiting = 0
        self._suspended = {}
        self._suspended_lock = threading.Lock()
        self._rr = 0
        self.task_errors: list[tuple[int, BaseException]] = []
        for i in range(self.config.workers):
            self.workers.append(_Worker(self, i, self.config.seed * 1000003 + i))
        self._spawned_by_worker = [0] * self.config.workers

    # -- lifecycle ---------------------------------------------------------

    def start(self):
        if self._started:
            return self
        self._started = True
        for w in self.workers:
            w.start()
        return self

    def shutdown(self):
        if self._shut_down:
            return
        self._shut_down = True
        self._stop = True
        for w in self.workers:
            with w.cond:
                w.cond.notify_all()
        with self.gq_cond:
            self.gq_cond.notify_all()
        if self._started:
            for w in self.workers:
                w.join()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.shutdown()

    # -- spawning ----------------------------------------------------------

    def spawn(self, fn, args=(), priority=0) -> int:
        """Schedule ``fn(*args)`` as a new task; returns its gid immediately."""
        if self._shut_down:
            raise RuntimeShutDownError("spawn after shutdown")
        if priority not in (0, 1):
            raise ValueError("priority must be 0 (normal) or 1 (high)")
        gid = self._gids.allocate(KIND_TASK)
        task = TaskDescriptor(gid, fn, args, priority)
        me = getattr(self._tls, "worker", None)
        if me is not None:
            self._spawned_by_worker[me.idx] += 1
        else:
            with self._spawned_lock:
                self._spawned_external += 1
        self._enqueue_fresh(task, me)
        return gid

    def _enqueue_fresh(self, task, me):
        if self.policy == POLICY_GLOBAL:
            (self.gq_hi if task.priority else self.gq_norm).append(task)
            self._notify_global()
        else:
            w = me if me is not None else self.workers[0]
            (w.hi if task.priority else w.norm).append(task)
            self._notify_local(w)

    def _enqueue_resume(self, task):
        w = self.workers[task.worker]
        w.resume.append(task)
        if self.policy == POLICY_GLOBAL:
            self._notify_global()
        else:
            self._notify_local(w)

    def _notify_global(self):
        for w in self.workers:
            if w.parked:
                with self.gq_cond:
                    self.gq_cond.notify_all()
                return

    def _notify_local(self, owner):
        if owner.parked:
            with owner.cond:
                owner.cond.notify()
            return
        # Wake one parked worker so it can steal.
        for w in self.workers:
            if w.parked and w is not owner:
                with w.cond:
                    w.cond.notify()
                return

    # -- running task services ---------------------------------------------

    def _task_entry(self, task):
        try:
            task.fn(*task.args)
        except BaseException as exc:  # noqa: BLE001 - surfaced via error sink
            self.task_errors.append((task.gid, exc))

    def current_task(self) -> TaskDescriptor | None:
        w = getattr(self._tls, "worker", None)
        return w.current if w is not None else None

    def current_worker_index(self) -> int | None:
        w = getattr(self._tls, "worker", None)
        return w.idx if w is not None else None

    def prepare_suspend(self) -> WakeToken:
        """Create a wake token for the current task, to publish before
        calling :meth:`suspend`."""
        w = getattr(self._tls, "worker", None)
        if w is None or w.current is None:
            raise SuspendOutsideTaskError("prepare_suspend outside a task")
        task = w.current
        task.ensure_lock()
        return WakeToken(self, task)

    def suspend(self, token: WakeToken) -> None:
        """Park the current task until ``token`` is triggered.

        Returns immediately if the token fired between publication and this
        call.  The worker switches to other work while the task is parked.
        """
        w = getattr(self._tls, "worker", None)
        if w is None or w.current is None:
            raise SuspendOutsideTaskError("suspend outside a task")
        task = w.current
        if token._task is not task:
            raise RuntimeError("suspend with a token of another task")
        with task.lock:
            if task.early_wake:
                task.early_wake = False
                return
            task.state = SUSPENDED
        w.suspensions += 1
        with self._suspended_lock:
            self._suspended[task.gid] = task
        w.sched_glet.switch()
        # resumed
        with self._suspended_lock:
            self._suspended.pop(task.gid, None)

    # -- draining ----------------------------------------------------------

    def _counts(self):
        # Read completed before spawned so completed <= spawned always holds.
        completed = sum(w.completed for w in self.workers)
        spawned = sum(self._spawned_by_worker) + self._spawned_external
        return spawned, completed

    def quiesce(self, timeout: float | None = None) -> RuntimeStats:
        """Block until every spawned task has completed; returns stats.

        Raises :class:`QuiesceTimeoutError` naming suspended task gids if
        ``timeout`` elapses first.
        """
        if not self._started:
            self.start()
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._quiesce_cond:
            self._quiesce_waiting += 1
            try:
                while True:
                    spawned, completed = self._counts()
                    if completed >= spawned:
                        return self.stats()
                    if deadline is not None and time.monotonic() >= deadline:
                        with self._suspended_lock:
                            gids = list(self._suspended.keys())
                        raise QuiesceTimeoutError(gids, spawned - completed)
                    self._quiesce_cond.wait(0.002)
            finally:
                self._quiesce_waiting -= 1

    def stats(self) -> RuntimeStats:
        spawned, completed = self._counts()
        return RuntimeStats(
            tasks_spawned=spawned,
            tasks_completed=completed,
            steals=sum(w.steals for w in self.workers),
            suspensions=sum(w.suspensions for w in self.workers),
            busy_s=[w.busy for w in self.workers],
            completed_per_worker=[w.completed for w in self.workers],
        )
