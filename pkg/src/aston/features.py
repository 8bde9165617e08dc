"""Categorical vocabularies, duration statistics and per-event encoding.

Each event becomes eight features, in this order: activity id, resource id,
z-scored log time since trace start, z-scored log time since the previous
event, fraction of the day elapsed since midnight, weekday/6 (Monday = 0),
(month - 1)/11 and hour/23.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime
from typing import Iterable, Sequence

import numpy as np

from .eventlog import EOC, Event, EventLog

PAD, EOC_ID, UNK = 0, 1, 2
RESERVED = ("[PAD]", EOC, "[UNK]")
STD_FLOOR = 1e-8
N_FEATURES = 8
N_NUMERIC = 6


@dataclass
class Vocabulary:
    """Token/id map with PAD=0, EOC=1, UNK=2 reserved."""

    tokens: list[str] = field(default_factory=lambda: list(RESERVED))

    def __post_init__(self):
        if tuple(self.tokens[:3]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate vocabulary tokens")
        self._index = {tok: i for i, tok in enumerate(self.tokens)}

    @classmethod
    def build(cls, values: Iterable[str | None]) -> "Vocabulary":
        seen = sorted({v for v in values if v is not None and v not in RESERVED})
        return cls(list(RESERVED) + seen)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str | None) -> int:
        if token is None:
            return UNK
        return self._index.get(token, UNK)

    def ids(self, tokens: Iterable[str | None]) -> list[int]:
        return [self.id(t) for t in tokens]

    def token(self, idx: int) -> str:
        return self.tokens[idx]

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens


@dataclass(frozen=True)
class TimeStats:
    mean_log_since_prev: float
    std_log_since_prev: float
    mean_log_since_start: float
    std_log_since_start: float

    def to_dict(self) -> dict[str, float]:
        return {
            "mean_log_since_prev": self.mean_log_since_prev,
            "std_log_since_prev": self.std_log_since_prev,
            "mean_log_since_start": self.mean_log_since_start,
            "std_log_since_start": self.std_log_since_start,
        }


@dataclass(frozen=True)
class EventFeatures:
    activity_id: int
    resource_id: int
    t_since_start: float
    t_since_prev: float
    t_since_midnight: float
    day_of_week: float
    month: float
    hour: float

    def as_row(self) -> list[float]:
        return [
            float(self.activity_id),
            float(self.resource_id),
            self.t_since_start,
            self.t_since_prev,
            self.t_since_midnight,
            self.day_of_week,
            self.month,
            self.hour,
        ]


def _log_durations(trace_events: Sequence[Event]) -> tuple[list[float], list[float]]:
    start = trace_events[0].timestamp
    prev = start
    since_prev, since_start = [], []
    for e in trace_events:
        since_prev.append(math.log1p((e.timestamp - prev).total_seconds()))
        since_start.append(math.log1p((e.timestamp - start).total_seconds()))
        prev = e.timestamp
    return since_prev, since_start


def _mean_std(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return mean, max(std, STD_FLOOR)


def fit(train: EventLog) -> tuple[Vocabulary, Vocabulary, TimeStats]:
    """Fit activity/resource vocabularies and log-duration statistics on ``train``."""
    activity_vocab = Vocabulary.build(e.activity for t in train for e in t.events)
    resource_vocab = Vocabulary.build(e.resource for t in train for e in t.events)
    all_prev: list[float] = []
    all_start: list[float] = []
    for trace in train:
        p, s = _log_durations(trace.events)
        all_prev.extend(p)
        all_start.extend(s)
    mp, sp = _mean_std(all_prev)
    ms, ss = _mean_std(all_start)
    return activity_vocab, resource_vocab, TimeStats(mp, sp, ms, ss)


def _calendar(ts: datetime) -> tuple[float, float, float, float]:
    midnight = ts.replace(hour=0, minute=0, second=0, microsecond=0)
    since_midnight = (ts - midnight).total_seconds() / 86400.0
    return since_midnight, ts.weekday() / 6.0, (ts.month - 1) / 11.0, ts.hour / 23.0


def encode_event(
    e: Event,
    trace_context: tuple[datetime, datetime],
    activity_vocab: Vocabulary,
    resource_vocab: Vocabulary,
    stats: TimeStats,
) -> EventFeatures:
    """Encode one event given ``(trace start time, previous event time)``."""
    start, prev = trace_context
    if e.timestamp < start:
        raise ValueError("event precedes its trace start")
    d_prev = math.log1p(max((e.timestamp - prev).total_seconds(), 0.0))
    d_start = math.log1p((e.timestamp - start).total_seconds())
    midnight, dow, month, hour = _calendar(e.timestamp)
    return EventFeatures(
        activity_id=activity_vocab.id(e.activity),
        resource_id=resource_vocab.id(e.resource),
        t_since_start=(d_start - stats.mean_log_since_start) / stats.std_log_since_start,
        t_since_prev=(d_prev - stats.mean_log_since_prev) / stats.std_log_since_prev,
        t_since_midnight=midnight,
        day_of_week=dow,
        month=month,
        hour=hour,
    )


def encode_prefix(
    prefix: Sequence[Event], activity_vocab: Vocabulary, resource_vocab: Vocabulary, stats: TimeStats
) -> np.ndarray:
    """Matrix of shape (len(prefix), 8); rows are events, columns F1..F8."""
    if not prefix:
        raise ValueError("cannot encode an empty prefix")
    start = prefix[0].timestamp
    prev = start
    rows = []
    for e in prefix:
        rows.append(encode_event(e, (start, prev), activity_vocab, resource_vocab, stats).as_row())
        prev = e.timestamp
    return np.asarray(rows, dtype=np.float64)


def describe(activity_vocab: Vocabulary, resource_vocab: Vocabulary, stats: TimeStats) -> str:
    """Human-readable dump of fitted encoders."""
    lines = [f"activities ({activity_vocab.size}):"]
    lines += [f"  {i}\t{tok}" for i, tok in enumerate(activity_vocab.tokens)]
    lines.append(f"resources ({resource_vocab.size}):")
    lines += [f"  {i}\t{tok}" for i, tok in enumerate(resource_vocab.tokens)]
    lines.append("time stats:")
    lines += [f"  {k} = {v!r}" for k, v in stats.to_dict().items()]
    return "\n".join(lines) + "\n"
