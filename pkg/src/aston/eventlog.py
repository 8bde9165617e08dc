"""Event log parsing, prefix/suffix slicing and trace-level cross-validation."""

from __future__ import annotations

import csv
import json
import random
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Iterable, Sequence

EOC = "[EOC]"


class EventLogError(ValueError):
    """Base class for event log problems."""


class ColumnConfigError(EventLogError):
    """A mapped column is missing from the CSV header."""


class TimestampParseError(EventLogError):
    def __init__(self, line: int, value: str):
        super().__init__(f"line {line}: cannot parse timestamp {value!r}")
        self.line = line
        self.value = value


class EmptyLogError(EventLogError):
    pass


@dataclass(frozen=True)
class Event:
    case_id: str
    activity: str
    timestamp: datetime
    resource: str | None = None

    def __post_init__(self):
        if not self.case_id or not self.activity:
            raise EventLogError("events need a non-empty case id and activity")


@dataclass(frozen=True)
class Trace:
    case_id: str
    events: tuple[Event, ...]

    def __post_init__(self):
        if not self.events:
            raise EventLogError(f"trace {self.case_id!r} is empty")
        for prev, cur in zip(self.events, self.events[1:]):
            if cur.timestamp < prev.timestamp:
                raise EventLogError(f"trace {self.case_id!r} is not chronologically ordered")
        if any(e.case_id != self.case_id for e in self.events):
            raise EventLogError(f"trace {self.case_id!r} mixes case ids")

    def __len__(self) -> int:
        return len(self.events)

    @property
    def activities(self) -> tuple[str, ...]:
        return tuple(e.activity for e in self.events)


@dataclass(frozen=True)
class EventLog:
    traces: tuple[Trace, ...]
    source_path: str = ""

    def __post_init__(self):
        if not self.traces:
            raise EmptyLogError("event log contains no traces")
        ids = [t.case_id for t in self.traces]
        if len(set(ids)) != len(ids):
            raise EventLogError("case ids must be unique across traces")

    def __len__(self) -> int:
        return len(self.traces)

    def __iter__(self):
        return iter(self.traces)

    @property
    def n_events(self) -> int:
        return sum(len(t) for t in self.traces)

    @property
    def activities(self) -> set[str]:
        return {e.activity for t in self.traces for e in t.events}

    def subset(self, case_ids: Iterable[str]) -> "EventLog":
        wanted = set(case_ids)
        return EventLog(tuple(t for t in self.traces if t.case_id in wanted), self.source_path)


@dataclass(frozen=True)
class Example:
    prefix: tuple[Event, ...]
    suffix_activities: tuple[str, ...]

    def __post_init__(self):
        if not self.prefix:
            raise EventLogError("prefix must contain at least one event")
        if not self.suffix_activities or self.suffix_activities[-1] != EOC or EOC in self.suffix_activities[:-1]:
            raise EventLogError("suffix must end with exactly one EOC")

    @property
    def case_id(self) -> str:
        return self.prefix[0].case_id

    @property
    def prefix_len(self) -> int:
        return len(self.prefix)

    @property
    def gold_suffix(self) -> tuple[str, ...]:
        """Remaining activities without the EOC terminator."""
        return self.suffix_activities[:-1]


@dataclass
class ColumnMap:
    case: str = "case_id"
    activity: str = "activity"
    timestamp: str = "timestamp"
    resource: str | None = "resource"
    time_format: str | None = None


def parse_timestamp(value: str, time_format: str | None = None) -> datetime:
    value = value.strip()
    if time_format:
        return datetime.strptime(value, time_format)
    ts = datetime.fromisoformat(value.replace("Z", "+00:00") if value.endswith("Z") else value)
    # naive local time
    return ts.replace(tzinfo=None)


def parse_csv(path: str | Path, column_map: ColumnMap | None = None) -> EventLog:
    """Read a comma-separated event log into chronologically ordered traces.

    Rows with equal timestamps keep their file order. A mapped resource column
    that is absent from the header is treated as "no resources".
    """
    cmap = column_map or ColumnMap()
    path = Path(path)
    with path.open(newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyLogError(f"{path}: file is empty") from None
        index = {}
        for role, name in (("case", cmap.case), ("activity", cmap.activity), ("timestamp", cmap.timestamp)):
            if name not in header:
                raise ColumnConfigError(f"{path}: missing {role} column {name!r}")
            index[role] = header.index(name)
        res_idx = header.index(cmap.resource) if cmap.resource and cmap.resource in header else None

        grouped: dict[str, list[tuple[datetime, int, Event]]] = {}
        for row_no, row in enumerate(reader):
            line = row_no + 2
            if not row or all(not cell.strip() for cell in row):
                continue
            case = row[index["case"]].strip()
            activity = row[index["activity"]].strip()
            raw_ts = row[index["timestamp"]]
            try:
                ts = parse_timestamp(raw_ts, cmap.time_format)
            except ValueError:
                raise TimestampParseError(line, raw_ts) from None
            resource = row[res_idx].strip() if res_idx is not None and res_idx < len(row) else ""
            try:
                event = Event(case, activity, ts, resource or None)
            except EventLogError as exc:
                raise EventLogError(f"line {line}: {exc}") from None
            grouped.setdefault(case, []).append((ts, row_no, event))

    if not grouped:
        raise EmptyLogError(f"{path}: no events")
    traces = []
    for case, items in grouped.items():
        items.sort(key=lambda item: (item[0], item[1]))
        traces.append(Trace(case, tuple(e for _, _, e in items)))
    return EventLog(tuple(traces), str(path))


def write_csv(log: EventLog, path: str | Path, time_format: str | None = None) -> None:
    """Write a log in the layout :func:`parse_csv` reads with the default column map."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "activity", "timestamp", "resource"])
        for trace in log.traces:
            for e in trace.events:
                ts = e.timestamp.strftime(time_format) if time_format else e.timestamp.isoformat()
                writer.writerow([e.case_id, e.activity, ts, e.resource or ""])


def make_examples(log: EventLog | Iterable[Trace], min_prefix_len: int = 1) -> list[Example]:
    """One example per prefix length ``k`` in ``[min_prefix_len, len(trace)]``."""
    if min_prefix_len < 1:
        raise ValueError("min_prefix_len must be >= 1")
    examples = []
    for trace in log:
        acts = trace.activities
        for k in range(min_prefix_len, len(trace) + 1):
            examples.append(Example(trace.events[:k], acts[k:] + (EOC,)))
    return examples


@dataclass
class FoldPlan:
    """Assignment of case ids to cross-validation folds."""

    fold_count: int
    assignments: dict[str, int]
    seed: int = 0

    @classmethod
    def create(cls, log: EventLog, k: int = 5, seed: int = 0) -> "FoldPlan":
        if k < 2:
            raise ValueError("need at least 2 folds")
        if len(log) < k:
            raise EventLogError(f"cannot split {len(log)} traces into {k} folds")
        ids = [t.case_id for t in log.traces]
        random.Random(seed).shuffle(ids)
        return cls(k, {case: i % k for i, case in enumerate(ids)}, seed)

    def fold_sizes(self) -> list[int]:
        sizes = [0] * self.fold_count
        for fold in self.assignments.values():
            sizes[fold] += 1
        return sizes

    def to_json(self) -> str:
        return json.dumps(
            {"fold_count": self.fold_count, "seed": self.seed, "assignments": self.assignments},
            indent=1,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        raw = json.loads(text)
        return cls(int(raw["fold_count"]), {str(k): int(v) for k, v in raw["assignments"].items()}, int(raw["seed"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "FoldPlan":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def train_val_split(traces: Sequence[Trace], val_fraction: float, seed: int) -> tuple[list[Trace], list[Trace]]:
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must be in (0, 1)")
    pool = list(traces)
    random.Random(seed).shuffle(pool)
    n_val = round(val_fraction * len(pool))
    if len(pool) >= 2:
        n_val = min(max(n_val, 1), len(pool) - 1)
    return pool[n_val:], pool[:n_val]


def split_fold(log: EventLog, plan: FoldPlan, fold: int, val_fraction: float = 0.2) -> tuple[EventLog, EventLog, EventLog]:
    """(train, val, test) for one fold; the remaining traces are shuffled with ``plan.seed + fold``."""
    test = [t for t in log.traces if plan.assignments[t.case_id] == fold]
    rest = [t for t in log.traces if plan.assignments[t.case_id] != fold]
    train, val = train_val_split(rest, val_fraction, plan.seed * 1000 + fold)
    src = log.source_path
    return EventLog(tuple(train), src), EventLog(tuple(val), src), EventLog(tuple(test), src)


def kfold_split(
    log: EventLog, k: int = 5, seed: int = 0, val_fraction: float = 0.2, plan: FoldPlan | None = None
) -> list[tuple[EventLog, EventLog, EventLog]]:
    plan = plan or FoldPlan.create(log, k, seed)
    return [split_fold(log, plan, i, val_fraction) for i in range(plan.fold_count)]
