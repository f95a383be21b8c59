"""Minimal discrete-event kernel: generator processes, FIFO resources and a fluid flow network.

Time is virtual milliseconds.  Ties in the event queue break on insertion
sequence, so a run is a pure function of its inputs.
"""
from __future__ import annotations

import heapq
import itertools
import math
from typing import Callable, Generator, Iterable


class Event:
    __slots__ = ("sim", "callbacks", "triggered", "value")

    def __init__(self, sim: "Simulator"):
        self.sim = sim
        self.callbacks: list[Callable] = []
        self.triggered = False
        self.value = None

    def succeed(self, value=None) -> "Event":
        if self.triggered:
            raise RuntimeError("event already triggered")
        self.triggered = True
        self.value = value
        for cb in self.callbacks:
            self.sim.schedule(0.0, cb, value)
        self.callbacks.clear()
        return self

    def on(self, cb: Callable) -> None:
        if self.triggered:
            self.sim.schedule(0.0, cb, self.value)
        else:
            self.callbacks.append(cb)


class Simulator:
    def __init__(self):
        self.now = 0.0
        self._heap: list = []
        self._seq = itertools.count()

    def schedule(self, delay: float, fn: Callable, *args) -> None:
        if delay < 0 or math.isnan(delay):
            raise ValueError(f"negative delay {delay}")
        heapq.heappush(self._heap, (self.now + delay, next(self._seq), fn, args))

    def event(self) -> Event:
        return Event(self)

    def timeout(self, delay: float, value=None) -> Event:
        ev = Event(self)
        self.schedule(delay, ev.succeed, value)
        return ev

    def process(self, gen: Generator) -> Event:
        """Run ``gen``; it yields events and is resumed with each event's value."""
        done = Event(self)

        def step(value):
            try:
                target = gen.send(value)
            except StopIteration as stop:
                done.succeed(stop.value)
                return
            target.on(step)

        self.schedule(0.0, step, None)
        return done

    def all_of(self, events: Iterable[Event]) -> Event:
        events = list(events)
        done = Event(self)
        if not events:
            self.schedule(0.0, done.succeed, [])
            return done
        left = [len(events)]

        def one(_):
            left[0] -= 1
            if left[0] == 0:
                done.succeed([e.value for e in events])

        for e in events:
            e.on(one)
        return done

    def stop(self) -> None:
        """Drop every pending event; ``run`` returns once the current callback finishes."""
        self._heap.clear()

    def run(self, until: float | None = None) -> None:
        while self._heap:
            t, _, fn, args = self._heap[0]
            if until is not None and t > until:
                self.now = until
                return
            heapq.heappop(self._heap)
            self.now = t
            fn(*args)


class Resource:
    """Counting semaphore with FIFO grant order."""

    def __init__(self, sim: Simulator, capacity: int = 1):
        self.sim = sim
        self.capacity = capacity
        self.in_use = 0
        self._waiters: list[Event] = []

    def acquire(self) -> Event:
        ev = self.sim.event()
        if self.in_use < self.capacity:
            self.in_use += 1
            ev.succeed()
        else:
            self._waiters.append(ev)
        return ev

    def release(self) -> None:
        if self._waiters:
            self._waiters.pop(0).succeed()
        else:
            self.in_use -= 1


class Barrier:
    """Releases every arrival once ``parties`` processes have arrived."""

    def __init__(self, sim: Simulator, parties: int):
        self.sim = sim
        self.parties = parties
        self.arrived = 0
        self.released = sim.event()

    def arrive(self) -> Event:
        self.arrived += 1
        if self.arrived == self.parties:
            self.released.succeed(self.sim.now)
        return self.released


class Link:
    """A shared transfer resource.

    With ``threshold`` set, a flow that arrives while ``threshold`` or more
    flows are already active is throttled for its whole lifetime: its rate is
    capped at ``fair_share / penalty``.
    """

    def __init__(self, name: str, capacity: float, threshold: int | None = None, penalty: float = 1.0):
        if capacity <= 0:
            raise ValueError(f"link {name}: capacity must be positive")
        self.name = name
        self.capacity = capacity  # bytes per ms
        self.threshold = threshold
        self.penalty = penalty
        self.active: list["Flow"] = []
        self.bytes_delivered = 0.0
        self.flows_served = 0
        self.flows_throttled = 0

    def __repr__(self):
        return f"Link({self.name})"


class Flow:
    __slots__ = ("id", "size", "remaining", "links", "max_rate", "throttled", "rate",
                 "done", "start", "end", "delivered", "tag")

    def __init__(self, fid, size, links, max_rate, done, start, tag):
        self.id = fid
        self.size = float(size)
        self.remaining = float(size)
        self.links = links
        self.max_rate = max_rate
        self.throttled: list[Link] = []
        self.rate = 0.0
        self.done = done
        self.start = start
        self.end = None
        self.delivered = 0.0
        self.tag = tag


class FlowNetwork:
    """Fluid transfers with max-min fair sharing across every link a flow crosses."""

    EPS = 1e-9

    def __init__(self, sim: Simulator):
        self.sim = sim
        self.links: dict[str, Link] = {}
        self._flows: list[Flow] = []
        self._ids = itertools.count()
        self._last = 0.0
        self._version = 0
        self.completed: list[Flow] = []

    def link(self, name: str, bytes_per_s: float, threshold: int | None = None, penalty: float = 1.0) -> Link:
        link = Link(name, bytes_per_s / 1000.0, threshold, penalty)
        self.links[name] = link
        return link

    def transfer(self, nbytes: float, links: list[Link], max_rate_bps: float = math.inf, tag=None) -> Event:
        """Move ``nbytes`` across ``links``; the returned event's value is the finished :class:`Flow`."""
        done = self.sim.event()
        if not links and math.isinf(max_rate_bps):
            raise ValueError("a flow needs at least one link or a finite rate cap")
        flow = Flow(next(self._ids), nbytes, list(links), max_rate_bps / 1000.0, done, self.sim.now, tag)
        if nbytes <= 0:
            flow.end = self.sim.now
            done.succeed(flow)
            return done
        self._advance()
        for link in flow.links:
            if link.threshold is not None and len(link.active) >= link.threshold:
                flow.throttled.append(link)
                link.flows_throttled += 1
            link.active.append(flow)
            link.flows_served += 1
        self._flows.append(flow)
        self._reallocate()
        return done

    def _advance(self) -> None:
        dt = self.sim.now - self._last
        if dt > 0:
            for f in self._flows:
                moved = min(f.rate * dt, f.remaining)
                f.remaining -= moved
                f.delivered += moved
                for link in f.links:
                    link.bytes_delivered += moved
        self._last = self.sim.now

    def _reallocate(self) -> None:
        """Progressive filling: repeatedly freeze the flows on the tightest link, or the
        flows whose own cap is below every remaining link share."""
        flows = self._flows
        caps: dict[int, float] = {}
        spare: dict[Link, float] = {}
        count: dict[Link, int] = {}
        for f in flows:
            cap = f.max_rate
            for link in f.throttled:
                cap = min(cap, link.capacity / len(link.active) / link.penalty)
            caps[f.id] = cap
            for link in f.links:
                spare[link] = link.capacity
                count[link] = count.get(link, 0) + 1
        heap = [(spare[l] / n, i, l) for i, (l, n) in enumerate(count.items())]
        heapq.heapify(heap)
        order = {l: i for i, l in enumerate(count)}
        by_cap = sorted(flows, key=lambda f: caps[f.id])
        frozen: set[int] = set()
        ptr = 0

        def freeze(f: Flow, rate: float) -> None:
            f.rate = rate
            frozen.add(f.id)
            for link in f.links:
                spare[link] -= rate
                count[link] -= 1
                if count[link]:
                    heapq.heappush(heap, (max(spare[link], 0.0) / count[link], order[link], link))

        while len(frozen) < len(flows):
            share, link = math.inf, None
            while heap:
                s, _, l = heap[0]
                if count[l] and abs(s - max(spare[l], 0.0) / count[l]) <= 1e-12 * max(s, 1.0):
                    share, link = s, l
                    break
                heapq.heappop(heap)
            while ptr < len(by_cap) and by_cap[ptr].id in frozen:
                ptr += 1
            if ptr < len(by_cap) and caps[by_cap[ptr].id] <= share:
                while ptr < len(by_cap) and caps[by_cap[ptr].id] <= share:
                    f = by_cap[ptr]
                    if f.id not in frozen:
                        freeze(f, caps[f.id])
                    ptr += 1
                continue
            for f in link.active:
                if f.id not in frozen:
                    freeze(f, share)
        self._schedule_next()

    def _schedule_next(self) -> None:
        self._version += 1
        best = math.inf
        for f in self._flows:
            if f.rate > 0:
                best = min(best, f.remaining / f.rate)
        if best < math.inf:
            self.sim.schedule(best, self._on_tick, self._version)

    def _on_tick(self, version: int) -> None:
        if version != self._version:
            return
        self._advance()
        finished = [f for f in self._flows
                    if f.remaining <= self.EPS * max(1.0, f.size)
                    or (f.rate > 0 and f.remaining / f.rate < 1e-6)]
        for f in finished:
            f.delivered += f.remaining
            for link in f.links:
                link.bytes_delivered += f.remaining
                link.active.remove(f)
            f.remaining = 0.0
            f.end = self.sim.now
            self._flows.remove(f)
            self.completed.append(f)
        self._reallocate()
        for f in finished:
            f.done.succeed(f)
