"""Discrete-event kernel: a time-ordered callback queue, futures and generator processes.

Time is a float in milliseconds. Events scheduled for the same instant run in
scheduling order, so a run is a pure function of its inputs.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Any, Callable, Generator, Optional


@dataclass(frozen=True)
class SimEvent:
    time: float
    node: str
    action: str


class Timer:
    __slots__ = ("cancelled",)

    def __init__(self):
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class Future:
    """One-shot result holder that processes can wait on."""

    def __init__(self, sim: "Simulator"):
        self.sim = sim
        self.done = False
        self.value: Any = None
        self.error: Optional[BaseException] = None
        self._callbacks: list[Callable[["Future"], None]] = []

    def set_result(self, value=None) -> None:
        if self.done:
            return
        self.done, self.value = True, value
        self._fire()

    def set_error(self, error: BaseException) -> None:
        if self.done:
            return
        self.done, self.error = True, error
        self._fire()

    def add_callback(self, fn: Callable[["Future"], None]) -> None:
        if self.done:
            fn(self)
        else:
            self._callbacks.append(fn)

    def result(self):
        if not self.done:
            raise RuntimeError("future is still pending")
        if self.error is not None:
            raise self.error
        return self.value

    def _fire(self) -> None:
        callbacks, self._callbacks = self._callbacks, []
        for fn in callbacks:
            fn(self)


class Process(Future):
    """Drives a generator that yields futures; resolves with its return value."""

    def __init__(self, sim: "Simulator", gen: Generator):
        super().__init__(sim)
        self._gen = gen
        sim.call_soon(self._step, None, None)

    def _step(self, value, error) -> None:
        try:
            waited = self._gen.throw(error) if error is not None else self._gen.send(value)
        except StopIteration as stop:
            self.set_result(stop.value)
            return
        except Exception as exc:  # surfaced to whoever waits on the process
            self.set_error(exc)
            return
        if not isinstance(waited, Future):
            self.set_error(TypeError(f"process yielded {waited!r}, expected a Future"))
            return
        waited.add_callback(lambda f: self._step(f.value, f.error))


class Simulator:
    def __init__(self, trace: bool = False):
        self.now = 0.0
        self._queue: list = []
        self._seq = 0
        self.trace_enabled = trace
        self.trace: list[SimEvent] = []

    def schedule(self, delay: float, fn: Callable, *args) -> Timer:
        if delay < 0:
            raise ValueError("cannot schedule into the past")
        timer = Timer()
        heapq.heappush(self._queue, (self.now + delay, self._seq, timer, fn, args))
        self._seq += 1
        return timer

    def call_soon(self, fn: Callable, *args) -> Timer:
        return self.schedule(0.0, fn, *args)

    def timeout(self, delay: float) -> Future:
        fut = Future(self)
        self.schedule(delay, fut.set_result, None)
        return fut

    def process(self, gen: Generator) -> Process:
        return Process(self, gen)

    def log(self, node: str, action: str) -> None:
        if self.trace_enabled:
            self.trace.append(SimEvent(self.now, node, action))

    def step(self) -> bool:
        while self._queue:
            time, _, timer, fn, args = heapq.heappop(self._queue)
            if timer.cancelled:
                continue
            self.now = time
            fn(*args)
            return True
        return False

    def run(self, until: Optional[float] = None) -> None:
        while self._queue:
            if until is not None and self._queue[0][0] > until:
                self.now = until
                return
            self.step()
        if until is not None:
            self.now = max(self.now, until)

    def run_until_complete(self, fut: Future, limit: Optional[float] = None):
        """Run until ``fut`` resolves (or the queue empties) and return its result."""
        while not fut.done and self._queue:
            if limit is not None and self._queue[0][0] > limit:
                break
            self.step()
        return fut.result()
