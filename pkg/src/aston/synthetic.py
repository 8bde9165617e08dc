"""Synthetic event logs with known structure, for tests and demos."""

from __future__ import annotations

from datetime import datetime, timedelta

import numpy as np

from .eventlog import Event, EventLog, Trace


def _trace(case: str, steps: list[tuple[str, str | None]], start: datetime, rng: np.random.Generator) -> Trace:
    events = []
    t = start
    for activity, resource in steps:
        events.append(Event(case, activity, t, resource))
        t = t + timedelta(minutes=int(rng.integers(5, 240)))
    return Trace(case, tuple(events))


def _start(rng: np.random.Generator) -> datetime:
    return datetime(2021, 1, 4, 8) + timedelta(hours=int(rng.integers(0, 24 * 300)))


def sequential_log(n_traces: int = 200, activities=("A", "B", "C", "D"), seed: int = 0) -> EventLog:
    """Every trace runs the same activities in order."""
    rng = np.random.default_rng(seed)
    traces = [
        _trace(f"case{i:04d}", [(a, "r0") for a in activities], _start(rng), rng) for i in range(n_traces)
    ]
    return EventLog(tuple(traces), "synthetic:sequential")


def branching_log(n_traces: int = 200, seed: int = 0) -> EventLog:
    """``S`` then ``B, C`` or ``C, B`` depending on the resource of ``S``, then ``D``.

    The branch is fully determined by the first event, so every suffix is
    predictable from any prefix.
    """
    rng = np.random.default_rng(seed)
    traces = []
    for i in range(n_traces):
        left = bool(rng.integers(0, 2))
        res = "alice" if left else "bob"
        middle = ["B", "C"] if left else ["C", "B"]
        steps = [("S", res)] + [(a, "clerk") for a in middle] + [("D", "clerk")]
        traces.append(_trace(f"case{i:04d}", steps, _start(rng), rng))
    return EventLog(tuple(traces), "synthetic:branching")


def looping_log(n_traces: int = 300, p_repeat: float = 0.85, max_loops: int = 20, seed: int = 0) -> EventLog:
    """``A`` then a ``B, C`` loop repeated geometrically (at least once) then ``D, E``.

    Each extra loop iteration happens with probability ``p_repeat``, so a
    likelihood-greedy decoder keeps looping while the true continuation ends
    after a few iterations.
    """
    rng = np.random.default_rng(seed)
    traces = []
    for i in range(n_traces):
        loops = 1
        while loops < max_loops and rng.random() < p_repeat:
            loops += 1
        steps = [("A", "r0")] + [("B", "r1"), ("C", "r2")] * loops + [("D", "r0"), ("E", "r0")]
        traces.append(_trace(f"case{i:04d}", steps, _start(rng), rng))
    return EventLog(tuple(traces), "synthetic:looping")
