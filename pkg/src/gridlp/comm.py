"""Axis-scoped sum-AllReduce collectives over a simulated 2D device grid.

The backend is a single-process grid with one logical worker per device
coordinate; collectives are rendezvous points where the deposited
contributions are reduced in ascending device order, so results are
deterministic and identical on every device. Two interchangeable executors
implement the same Communicator contract:

- "cooperative" (default): workers run as greenlets under a round-robin
  scheduler; a worker that never reaches a collective surfaces instantly as
  a deadlock diagnostic. No OS threads, no synchronization cost.
- "threads": one OS thread per device with condition-variable rendezvous
  and a configurable timeout; sparse products release the GIL, so large
  blocks genuinely overlap.

Both executors produce bit-identical results and counters. Every collective
carries a sequence tag (call number, operation, axis, length); mismatched
tags across a group mean the program violated the lockstep contract and all
participants raise instead of deadlocking. A real message-passing backend
can slot in behind Communicator without touching solver code.
"""

from __future__ import annotations

import enum
import threading
from collections import deque
from dataclasses import dataclass

import greenlet
import numpy as np

BACKENDS = ("cooperative", "threads")


class Axis(enum.Enum):
    R = "R"   # reduce down a grid column (across the row index)
    C = "C"   # reduce along a grid row (across the column index)
    G = "G"   # reduce over the whole grid

    def __str__(self):
        return self.value


class CollectiveError(RuntimeError):
    pass


class CollectiveTimeout(CollectiveError):
    pass


class CollectiveMismatch(CollectiveError):
    pass


class WorkerError(RuntimeError):
    """A device worker raised; the original exception is chained."""


@dataclass
class AxisCounters:
    vector_calls: int = 0
    scalar_calls: int = 0
    elements_reduced: int = 0

    def as_dict(self):
        return {
            "vector_calls": self.vector_calls,
            "scalar_calls": self.scalar_calls,
            "elements_reduced": self.elements_reduced,
        }


def _reduce_ascending(slots):
    acc = slots[0]
    if isinstance(acc, np.ndarray):
        acc = acc.copy()
        for k in range(1, len(slots)):
            acc += slots[k]
    else:
        for k in range(1, len(slots)):
            acc = acc + slots[k]
    return acc


def _check_tags(tags):
    if any(t != tags[0] for t in tags[1:]):
        raise CollectiveMismatch(
            f"collective sequence mismatch across group: {sorted(set(tags))}"
        )


class _Group:
    """One collective group: member list plus the thread-backend rendezvous."""

    def __init__(self, parties: int, timeout: float):
        self.parties = parties
        self.timeout = timeout
        self._cond = threading.Condition(threading.Lock())
        self._slots = [None] * parties
        self._tags = [None] * parties
        self._arrived = 0
        self._generation = 0
        self._result = None
        self._failure = None

    def reduce(self, rank: int, value, tag):
        with self._cond:
            if self._failure is not None:
                raise self._failure
            self._slots[rank] = value
            self._tags[rank] = tag
            self._arrived += 1
            if self._arrived == self.parties:
                try:
                    _check_tags(self._tags)
                    self._result = _reduce_ascending(self._slots)
                except CollectiveError as exc:
                    self._failure = exc
                self._arrived = 0
                self._generation += 1
                self._cond.notify_all()
            else:
                generation = self._generation
                while self._generation == generation and self._failure is None:
                    if not self._cond.wait(self.timeout):
                        self._failure = CollectiveTimeout(
                            f"collective {tag} timed out after {self.timeout}s waiting "
                            f"for {self.parties - self._arrived} of {self.parties} devices"
                        )
                        self._cond.notify_all()
            if self._failure is not None:
                raise self._failure
            result = self._result
        # the buffer stays valid until every participant returns, so the
        # per-participant copy can happen outside the lock
        if isinstance(result, np.ndarray):
            result = result.copy()
        return result


class SimulatedGrid:
    """Shared fabric for all device coordinates of one solve.

    `topology` is any object with integer fields `rows` and `cols`.
    """

    def __init__(self, topology, timeout: float = 120.0, backend: str = "cooperative"):
        rows, cols = int(topology.rows), int(topology.cols)
        if rows < 1 or cols < 1:
            raise ValueError("grid must have at least one row and one column")
        if backend not in BACKENDS:
            raise ValueError(f"unknown backend {backend!r}; expected one of {BACKENDS}")
        self.topology = topology
        self.timeout = timeout
        self.backend = backend
        # R-axis groups run down each grid column; C-axis along each row
        self._r_groups = [_Group(rows, timeout) for _ in range(cols)]
        self._c_groups = [_Group(cols, timeout) for _ in range(rows)]
        self._g_group = _Group(rows * cols, timeout)
        self._barrier_group = _Group(rows * cols, timeout)
        self._scheduler: _CoopScheduler | None = None

    def communicator(self, i: int, j: int) -> "Communicator":
        rows, cols = self.topology.rows, self.topology.cols
        if not (0 <= i < rows and 0 <= j < cols):
            raise ValueError(f"coordinate ({i}, {j}) outside {rows}x{cols} grid")
        return Communicator(self, i, j)

    def coords(self):
        return [
            (i, j)
            for i in range(self.topology.rows)
            for j in range(self.topology.cols)
        ]

    def run_workers(self, worker) -> dict:
        """Run `worker(comm)` once per device coordinate and collect results.

        The callable receives that device's Communicator. Worker exceptions
        abort the run and re-raise, lowest coordinate first.
        """
        coords = self.coords()
        if len(coords) == 1:
            comm = self.communicator(*coords[0])
            return {coords[0]: worker(comm)}
        if self.backend == "cooperative":
            scheduler = _CoopScheduler(self)
            self._scheduler = scheduler
            try:
                return scheduler.run(worker, coords)
            finally:
                self._scheduler = None
        return self._run_threads(worker, coords)

    def _run_threads(self, worker, coords) -> dict:
        results: dict = {}
        errors: dict = {}
        lock = threading.Lock()

        def body(coord):
            try:
                out = worker(self.communicator(*coord))
                with lock:
                    results[coord] = out
            except BaseException as exc:
                with lock:
                    errors[coord] = exc

        threads = [
            threading.Thread(target=body, args=(c,), name=f"device-{c}")
            for c in coords
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            coord = sorted(errors)[0]
            raise WorkerError(f"device {coord} failed") from errors[coord]
        return results


class _CoopScheduler:
    """Round-robin greenlet executor; collectives park workers on their group
    until every member has deposited, then the reduction is computed once in
    ascending device order and each member resumes with its own copy."""

    def __init__(self, grid: SimulatedGrid):
        self.grid = grid
        self._main = None
        self._pending: dict[int, list] = {}   # id(group) -> [(rank, coord, value, tag)]

    _START = object()

    def run(self, worker, coords) -> dict:
        self._main = greenlet.getcurrent()
        workers = {}
        runnable = deque()
        results = {}
        errors = {}
        for coord in coords:
            comm = self.grid.communicator(*coord)
            workers[coord] = greenlet.greenlet(lambda w=worker, c=comm: w(c))
            runnable.append((coord, self._START))

        while runnable:
            coord, send_value = runnable.popleft()
            job = workers[coord]
            try:
                request = job.switch() if send_value is self._START else job.switch(send_value)
            except BaseException as exc:   # worker raised; others may deadlock
                errors[coord] = exc
                continue
            if job.dead:
                results[coord] = request
                continue
            group, rank, value, tag = request
            waiting = self._pending.setdefault(id(group), [])
            waiting.append((rank, coord, value, tag))
            if len(waiting) == group.parties:
                del self._pending[id(group)]
                waiting.sort(key=lambda item: item[0])
                _check_tags([item[3] for item in waiting])
                reduced = _reduce_ascending([item[2] for item in waiting])
                for _, member, _, _ in waiting:
                    out = reduced.copy() if isinstance(reduced, np.ndarray) else reduced
                    runnable.append((member, out))

        if errors:
            coord = sorted(errors)[0]
            raise WorkerError(f"device {coord} failed") from errors[coord]
        if len(results) != len(coords):
            stuck = sorted(set(coords) - set(results))
            tags = sorted(
                item[3] for waiting in self._pending.values() for item in waiting
            )
            raise CollectiveError(
                f"deadlock: devices {stuck} never completed; "
                f"pending collectives {tags[:8]}"
            )
        return results

    def rendezvous(self, group, rank, value, tag):
        return self._main.switch((group, rank, value, tag))


class Communicator:
    """Per-device handle for the collective contract; see SimulatedGrid."""

    def __init__(self, grid: SimulatedGrid, i: int, j: int):
        self.grid = grid
        self.coord = (i, j)
        self._seq = 0
        self.counters = {axis: AxisCounters() for axis in Axis}
        cols = grid.topology.cols
        # (group, this device's rank within it), members in ascending order
        self._routes = {
            Axis.R: (grid._r_groups[j], i),
            Axis.C: (grid._c_groups[i], j),
            Axis.G: (grid._g_group, i * cols + j),
        }

    @property
    def topology(self):
        return self.grid.topology

    def _rendezvous(self, axis: Axis, value, kind: str, length: int):
        self._seq += 1
        group, rank = self._routes[axis]
        if group.parties == 1:
            if isinstance(value, np.ndarray):
                return value.copy()
            return value
        tag = (self._seq, kind, axis.value, length)
        scheduler = self.grid._scheduler
        if scheduler is not None:
            return scheduler.rendezvous(group, rank, value, tag)
        return group.reduce(rank, value, tag)

    def allreduce_sum(self, axis: Axis, local: np.ndarray) -> np.ndarray:
        """Elementwise sum over the axis group; every participant receives
        the result, accumulated in ascending device order."""
        local = np.ascontiguousarray(local, dtype=np.float64)
        c = self.counters[axis]
        c.vector_calls += 1
        c.elements_reduced += local.shape[0]
        return self._rendezvous(axis, local, "vec", local.shape[0])

    def allreduce_sum_scalar(self, axis: Axis, x: float) -> float:
        c = self.counters[axis]
        c.scalar_calls += 1
        c.elements_reduced += 1
        return float(self._rendezvous(axis, float(x), "scalar", 1))

    def barrier(self):
        """All devices reach the call before any returns."""
        self._seq += 1
        group = self.grid._barrier_group
        if group.parties == 1:
            return
        i, j = self.coord
        rank = i * self.grid.topology.cols + j
        tag = (self._seq, "barrier", "G", 0)
        scheduler = self.grid._scheduler
        if scheduler is not None:
            scheduler.rendezvous(group, rank, 0.0, tag)
        else:
            group.reduce(rank, 0.0, tag)

    def counter_snapshot(self) -> dict:
        return {axis.value: self.counters[axis].as_dict() for axis in Axis}


def total_counters(snapshots: list[dict]) -> dict:
    """Sum per-device counter snapshots into one grid-wide tally."""
    out = {a.value: AxisCounters() for a in Axis}
    for snap in snapshots:
        for axis, vals in snap.items():
            out[axis].vector_calls += vals["vector_calls"]
            out[axis].scalar_calls += vals["scalar_calls"]
            out[axis].elements_reduced += vals["elements_reduced"]
    return {axis: c.as_dict() for axis, c in out.items()}
