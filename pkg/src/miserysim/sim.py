"""Discrete-event simulation kernel.

A single virtual clock, a binary-heap event queue, deterministic named RNG
streams, and a small cooperative-task layer (generators yielding delays or
futures) that the node runtimes are written against.  Determinism contract:
identical seed and identical call sequence produce identical event order;
ties at the same instant resolve by (priority, schedule sequence).
"""

from __future__ import annotations

import heapq
import itertools
import random
import time
from collections.abc import Callable, Generator
from typing import Any

# Tie-break priorities for events scheduled at the same instant.  Lower runs
# first: provider state flips before deliveries, deliveries before the
# multicaster's same-instant winner resolution, actors before control-plane
# and load-generation decisions.
PRIO_PROVIDER = 0
PRIO_NETWORK = 1
PRIO_RESOLVE = 2
PRIO_ACTOR = 3
PRIO_CONTROL = 4
PRIO_LOAD = 5


class Handle:
    """Cancellable reference to one scheduled callback."""

    __slots__ = ("t", "prio", "seq", "fn", "args", "cancelled")

    def __init__(self, t: float, prio: int, seq: int, fn: Callable[..., Any], args: tuple):
        self.t = t
        self.prio = prio
        self.seq = seq
        self.fn = fn
        self.args = args
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True
        self.fn = None
        self.args = ()

    def __lt__(self, other: "Handle") -> bool:
        return (self.t, self.prio, self.seq) < (other.t, other.prio, other.seq)


class Future:
    """Single-assignment result container resolved inside the event loop."""

    __slots__ = ("_state", "_value", "_callbacks")

    _PENDING, _DONE, _FAILED = 0, 1, 2

    def __init__(self) -> None:
        self._state = Future._PENDING
        self._value: Any = None
        self._callbacks: list[Callable[["Future"], None]] = []

    @property
    def done(self) -> bool:
        return self._state != Future._PENDING

    @property
    def failed(self) -> bool:
        return self._state == Future._FAILED

    def result(self) -> Any:
        if self._state == Future._PENDING:
            raise RuntimeError("future not resolved")
        if self._state == Future._FAILED:
            raise self._value
        return self._value

    def exception(self) -> BaseException | None:
        return self._value if self._state == Future._FAILED else None

    def resolve(self, value: Any = None) -> None:
        if self._state != Future._PENDING:
            return
        self._state = Future._DONE
        self._value = value
        self._flush()

    def reject(self, exc: BaseException) -> None:
        if self._state != Future._PENDING:
            return
        self._state = Future._FAILED
        self._value = exc
        self._flush()

    def add_done_callback(self, fn: Callable[["Future"], None]) -> None:
        if self._state != Future._PENDING:
            fn(self)
        else:
            self._callbacks.append(fn)

    def _flush(self) -> None:
        callbacks, self._callbacks = self._callbacks, []
        for fn in callbacks:
            fn(self)


class Task:
    """A generator driven by the simulation.

    The generator may yield a positive float (sleep that many virtual
    seconds), a Future (resume when it resolves; a rejected future is thrown
    into the generator), or None (resume on the next event at the same
    instant).  The task's own `future` resolves with the generator's return
    value, or rejects with its uncaught exception.
    """

    __slots__ = ("sim", "gen", "prio", "future", "_waiting", "cancelled")

    def __init__(self, sim: "Simulation", gen: Generator, prio: int):
        self.sim = sim
        self.gen = gen
        self.prio = prio
        self.future = Future()
        self._waiting: Handle | None = None
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True
        if self._waiting is not None:
            self._waiting.cancel()
            self._waiting = None
        self.gen.close()
        self.future.reject(SimCancelled())

    def _step(self, value: Any = None, exc: BaseException | None = None) -> None:
        if self.cancelled:
            return
        self._waiting = None
        try:
            item = self.gen.throw(exc) if exc is not None else self.gen.send(value)
        except StopIteration as stop:
            self.future.resolve(stop.value)
            return
        except SimCancelled:
            self.future.reject(SimCancelled())
            return
        except BaseException as err:
            # a crashing task must not take the scheduler down with it
            self.future.reject(err)
            return
        if isinstance(item, Future):
            item.add_done_callback(self._resume_from)
        elif item is None:
            self._waiting = self.sim.schedule(0.0, self._step, priority=self.prio)
        else:
            self._waiting = self.sim.schedule(float(item), self._step, priority=self.prio)

    def _resume_from(self, fut: Future) -> None:
        if fut.failed:
            self._step(exc=fut.exception())
        else:
            self._step(value=fut._value)


class SimCancelled(Exception):
    """Raised inside a task generator when its task is cancelled."""


class Simulation:
    """Virtual clock plus event queue plus named deterministic RNG streams."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.now = 0.0
        self._heap: list[Handle] = []
        self._seq = itertools.count()
        self._rngs: dict[str, random.Random] = {}
        self._processed = 0

    def rng(self, name: str) -> random.Random:
        """Deterministic per-subsystem stream, independent of other streams."""
        stream = self._rngs.get(name)
        if stream is None:
            stream = random.Random(f"{self.seed}/{name}")
            self._rngs[name] = stream
        return stream

    def schedule(self, delay: float, fn: Callable[..., Any], *args: Any,
                 priority: int = PRIO_ACTOR) -> Handle:
        if delay < 0:
            raise ValueError(f"negative delay {delay}")
        return self.schedule_at(self.now + delay, fn, *args, priority=priority)

    def schedule_at(self, t: float, fn: Callable[..., Any], *args: Any,
                    priority: int = PRIO_ACTOR) -> Handle:
        if t < self.now:
            raise ValueError(f"cannot schedule into the past ({t} < {self.now})")
        handle = Handle(t, priority, next(self._seq), fn, args)
        heapq.heappush(self._heap, handle)
        return handle

    def spawn(self, gen: Generator, priority: int = PRIO_ACTOR) -> Task:
        task = Task(self, gen, priority)
        task._waiting = self.schedule(0.0, task._step, priority=priority)
        return task

    def run(self, until: float | None = None, pace: float = 0.0) -> int:
        """Process events until the queue drains or the clock passes `until`.

        `pace` > 0 throttles to that many virtual seconds per wall second so
        a human can watch; 0 runs as fast as possible.  Returns the number of
        events processed by this call.
        """
        processed = 0
        heap = self._heap
        while heap:
            head = heap[0]
            if head.cancelled:
                heapq.heappop(heap)
                continue
            if until is not None and head.t > until:
                break
            if pace > 0.0 and head.t > self.now:
                time.sleep((head.t - self.now) / pace)
            handle = heapq.heappop(heap)
            self.now = handle.t
            fn, args = handle.fn, handle.args
            handle.fn, handle.args = None, ()
            fn(*args)
            processed += 1
        if until is not None and self.now < until:
            self.now = until
        self._processed += processed
        return processed

    def run_until(self, future: Future, limit: float | None = None) -> Any:
        """Process events until `future` resolves; returns its result."""
        heap = self._heap
        while not future.done:
            if not heap:
                raise RuntimeError("event queue drained before future resolved")
            head = heap[0]
            if head.cancelled:
                heapq.heappop(heap)
                continue
            if limit is not None and head.t > limit:
                raise RequestNeverCompletes(
                    f"future unresolved at t={limit} (next event t={head.t})")
            handle = heapq.heappop(heap)
            self.now = handle.t
            fn, args = handle.fn, handle.args
            handle.fn, handle.args = None, ()
            fn(*args)
            self._processed += 1
        return future.result()

    @property
    def events_processed(self) -> int:
        return self._processed


class RequestNeverCompletes(RuntimeError):
    """run_until hit its limit with the future still pending."""
