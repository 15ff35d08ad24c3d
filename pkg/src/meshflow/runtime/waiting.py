"""Blocking support shared by LCOs and transport backpressure.

A blocking operation parks the calling *task* via a wake token when invoked
from inside the runtime, and blocks the OS thread on an event otherwise.
"""

from __future__ import annotations

import threading


class TokenWaiter:
    __slots__ = ("token", "value")

    def __init__(self, token):
        self.token = token
        self.value = None

    def wake(self):
        self.token.trigger()


class EventWaiter:
    __slots__ = ("event", "value")

    def __init__(self):
        self.event = threading.Event()
        self.value = None

    def wake(self):
        self.event.set()


class WaitSupport:
    """Creates and parks waiters appropriate to the calling context."""

    def __init__(self, runtime):
        self.runtime = runtime

    def in_task(self):
        return self.runtime.current_task() is not None

    def make_waiter(self):
        if self.in_task():
            return TokenWaiter(self.runtime.prepare_suspend())
        return EventWaiter()

    def park(self, waiter):
        if isinstance(waiter, TokenWaiter):
            self.runtime.suspend(waiter.token)
        else:
            waiter.event.wait()
