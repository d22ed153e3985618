"""Event-log ingestion, sessionization and per-unit state sequences.

Timestamps are held as float seconds since the Unix epoch (naive times are
read as UTC), so every gap and threshold in this module is in seconds.
"""

from __future__ import annotations

import csv
import io
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import Callable, Iterable, Mapping, Sequence, TextIO

import numpy as np

from .errors import ConfigError, DataError, EmptySelectionError, RowError, SchemaError


@dataclass(frozen=True)
class Alphabet:
    """Ordered set of state labels; fixes row/column order of every matrix."""

    labels: tuple[str, ...]

    def __post_init__(self):
        labels = tuple(str(lab) for lab in self.labels)
        if not labels:
            raise DataError("alphabet is empty")
        if any(lab == "" for lab in labels):
            raise DataError("alphabet labels must be non-empty")
        if len(set(labels)) != len(labels):
            dupes = sorted({lab for lab in labels if labels.count(lab) > 1})
            raise DataError(f"duplicate alphabet labels: {dupes}")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "_index", {lab: i for i, lab in enumerate(labels)})

    @classmethod
    def from_codes(cls, codes: Iterable[str]) -> "Alphabet":
        """Alphabet in first-appearance order."""
        return cls(tuple(dict.fromkeys(codes)))

    @property
    def index(self) -> Mapping[str, int]:
        return self._index

    def __len__(self) -> int:
        return len(self.labels)

    def __contains__(self, label) -> bool:
        return label in self._index

    def __iter__(self):
        return iter(self.labels)

    def encode(self, codes: Iterable[str]) -> tuple[int, ...]:
        return tuple(self._index[c] for c in codes)

    def decode(self, states: Iterable[int]) -> list[str]:
        return [self.labels[s] for s in states]


@dataclass(frozen=True)
class Event:
    unit_id: str
    actor_id: str
    timestamp: float
    code: str
    line: int = 0
    attrs: Mapping[str, str] = field(default_factory=dict, compare=False)


@dataclass(frozen=True)
class EventLog:
    """Events grouped by unit and sorted by (timestamp, input order) within unit."""

    events: tuple[Event, ...]
    alphabet: Alphabet

    def units(self) -> list[str]:
        return list(dict.fromkeys(e.unit_id for e in self.events))

    def by_unit(self) -> dict[str, list[Event]]:
        out: dict[str, list[Event]] = defaultdict(list)
        for e in self.events:
            out[e.unit_id].append(e)
        return dict(out)

    def __len__(self) -> int:
        return len(self.events)


@dataclass(frozen=True)
class StateSequence:
    """Ordered states of one (unit, session), as alphabet indices."""

    unit_id: str
    session_id: int
    states: tuple[int, ...]
    covariates: Mapping[str, float] = field(default_factory=dict)
    times: tuple[float, ...] | None = None
    actors: tuple[str, ...] | None = None
    attrs: Mapping[str, str] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if len(self.states) < 1:
            raise DataError(f"empty sequence for unit {self.unit_id!r}")
        if self.times is not None and len(self.times) != len(self.states):
            raise DataError("times and states differ in length")
        if self.actors is not None and len(self.actors) != len(self.states):
            raise DataError("actors and states differ in length")

    def __len__(self) -> int:
        return len(self.states)


@dataclass(frozen=True)
class Schema:
    """Column mapping for an event table."""

    unit: str = "unit"
    timestamp: str = "timestamp"
    code: str = "code"
    actor: str | None = "actor"
    time_format: str | None = None  # None: ISO-8601 or plain numeric seconds
    delimiter: str = ","


@dataclass(frozen=True)
class SessionizationPolicy:
    mode: str = "fixed_gap"
    gap: float = 20 * 60.0
    quantile: float = 0.9

    def __post_init__(self):
        if self.mode == "fixed_gap":
            if not (self.gap > 0 and math.isfinite(self.gap)):
                raise ConfigError(f"fixed gap must be positive, got {self.gap}")
        elif self.mode == "quantile_gap":
            if not 0 < self.quantile < 1:
                raise ConfigError(f"gap quantile must lie in (0, 1), got {self.quantile}")
        else:
            raise ConfigError(f"unknown sessionization mode {self.mode!r}")

    def threshold(self, data) -> float:
        if self.mode == "fixed_gap":
            return float(self.gap)
        return gap_quantile(data, self.quantile)


def parse_timestamp(text: str, fmt: str | None = None) -> float:
    text = text.strip()
    if fmt:
        dt = datetime.strptime(text, fmt)
    else:
        try:
            value = float(text)
        except ValueError:
            if text.endswith(("Z", "z")):
                text = text[:-1] + "+00:00"
            dt = datetime.fromisoformat(text)
        else:
            if not math.isfinite(value):
                raise ValueError(f"non-finite timestamp {text!r}")
            return value
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def _open_text(source) -> tuple[TextIO, bool]:
    if isinstance(source, (str, os.PathLike)):
        try:
            return open(source, newline="", encoding="utf-8"), True
        except FileNotFoundError:
            raise DataError(f"input file not found: {source}") from None
    return source, False


def ingest(source, schema: Schema | None = None, alphabet: Alphabet | None = None) -> EventLog:
    """Read a delimited event table into an EventLog.

    ``source`` is a path or an open text stream with a header row. When no
    alphabet is given one is built from the codes in first-appearance order.
    """
    schema = schema or Schema()
    stream, owned = _open_text(source)
    try:
        reader = csv.reader(stream, delimiter=schema.delimiter)
        header = next(reader, None)
        if header is None:
            raise DataError("event file is empty")
        header = [h.strip() for h in header]
        wanted = [schema.unit, schema.timestamp, schema.code]
        actor_col = schema.actor
        if actor_col == "actor" and actor_col not in header:
            actor_col = None  # default column absent: each unit is its own actor
        if actor_col is not None:
            wanted.append(actor_col)
        for col in wanted:
            if col not in header:
                raise SchemaError(col, header)
        pos = {name: i for i, name in enumerate(header)}
        extra = [h for h in header if h not in wanted]

        raw: list[Event] = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise RowError(lineno, f"expected {len(header)} fields, got {len(row)}")
            unit = row[pos[schema.unit]].strip()
            code = row[pos[schema.code]].strip()
            if not code:
                raise RowError(lineno, "empty code")
            try:
                ts = parse_timestamp(row[pos[schema.timestamp]], schema.time_format)
            except ValueError as exc:
                raise RowError(lineno, f"unparseable timestamp {row[pos[schema.timestamp]]!r} ({exc})") from None
            actor = row[pos[actor_col]].strip() if actor_col is not None else unit
            attrs = {h: row[pos[h]] for h in extra}
            raw.append(Event(unit, actor, ts, code, lineno, attrs))
    finally:
        if owned:
            stream.close()

    if not raw:
        raise DataError("event file has a header but no rows")
    if alphabet is None:
        alphabet = Alphabet.from_codes(e.code for e in raw)
    else:
        for e in raw:
            if e.code not in alphabet:
                raise RowError(e.line, f"code {e.code!r} not in alphabet")
    return EventLog(_sort_events(raw), alphabet)


def ingest_text(text: str, schema: Schema | None = None, alphabet: Alphabet | None = None) -> EventLog:
    return ingest(io.StringIO(text), schema, alphabet)


def _sort_events(events: Sequence[Event]) -> tuple[Event, ...]:
    groups: dict[str, list[Event]] = defaultdict(list)
    for e in events:
        groups[e.unit_id].append(e)
    out: list[Event] = []
    for unit_events in groups.values():
        # sorted() is stable, so equal timestamps keep input order
        out.extend(sorted(unit_events, key=lambda e: e.timestamp))
    return tuple(out)


def within_unit_gaps(data) -> np.ndarray:
    """Inter-event gaps (seconds) inside each unit, or inside each sequence."""
    gaps: list[float] = []
    if isinstance(data, EventLog):
        for events in data.by_unit().values():
            ts = [e.timestamp for e in events]
            gaps.extend(b - a for a, b in zip(ts, ts[1:]))
    else:
        for seq in data:
            if seq.times is None:
                raise DataError(f"sequence of unit {seq.unit_id!r} carries no timestamps")
            gaps.extend(b - a for a, b in zip(seq.times, seq.times[1:]))
    return np.asarray(gaps, dtype=float)


def gap_quantile(data, q: float) -> float:
    """Empirical q-quantile of within-unit gaps (linear interpolation, type 7)."""
    if not 0 < q < 1:
        raise ConfigError(f"quantile must lie in (0, 1), got {q}")
    gaps = within_unit_gaps(data)
    if gaps.size == 0:
        raise DataError("no within-unit gaps: every unit has a single event")
    return float(np.quantile(gaps, q, method="linear"))


def _split(times: Sequence[float], threshold: float) -> list[tuple[int, int]]:
    bounds = [0]
    for i in range(1, len(times)):
        if times[i] - times[i - 1] > threshold:
            bounds.append(i)
    bounds.append(len(times))
    return list(zip(bounds, bounds[1:]))


def sessionize(data, policy: SessionizationPolicy | float,
               covariates: Mapping[str, Mapping[str, float]] | None = None) -> list[StateSequence]:
    """Split each unit into sessions wherever the gap exceeds the threshold.

    ``data`` is an EventLog or a list of timestamped StateSequences (which
    are split further, so re-running with the same threshold is a no-op).
    ``policy`` may be a bare threshold in seconds.
    """
    if not isinstance(policy, SessionizationPolicy):
        policy = SessionizationPolicy("fixed_gap", gap=float(policy))
    threshold = policy.threshold(data)
    covariates = covariates or {}

    out: list[StateSequence] = []
    if isinstance(data, EventLog):
        enc = data.alphabet.index
        for unit, events in data.by_unit().items():
            times = [e.timestamp for e in events]
            attrs = dict(events[0].attrs)
            for sid, (a, b) in enumerate(_split(times, threshold)):
                chunk = events[a:b]
                out.append(StateSequence(
                    unit_id=unit,
                    session_id=sid,
                    states=tuple(enc[e.code] for e in chunk),
                    covariates=dict(covariates.get(unit, {})),
                    times=tuple(times[a:b]),
                    actors=tuple(e.actor_id for e in chunk),
                    attrs=attrs,
                ))
        return out

    counters: dict[str, int] = defaultdict(int)
    for seq in data:
        if seq.times is None:
            raise DataError(f"sequence of unit {seq.unit_id!r} carries no timestamps")
        for a, b in _split(seq.times, threshold):
            sid = counters[seq.unit_id]
            counters[seq.unit_id] += 1
            out.append(replace(
                seq,
                session_id=sid,
                states=seq.states[a:b],
                times=seq.times[a:b],
                actors=None if seq.actors is None else seq.actors[a:b],
                covariates=dict(covariates.get(seq.unit_id, seq.covariates)),
            ))
    return out


def filter_unit(sequences: Sequence[StateSequence], *, unit=None, actor=None,
                predicate: Callable[[StateSequence], bool] | None = None) -> list[StateSequence]:
    """Subset sequences by unit, by actor, or by an arbitrary predicate.

    Selecting an actor keeps only that actor's own events, in order, from
    every sequence they took part in; that subset is the input for an
    idiographic (single-actor) model.
    """
    if unit is None and actor is None and predicate is None:
        raise ConfigError("filter_unit needs a unit, actor or predicate")
    out: list[StateSequence] = []
    for seq in sequences:
        if unit is not None and seq.unit_id != unit:
            continue
        if predicate is not None and not predicate(seq):
            continue
        if actor is not None:
            if seq.actors is None:
                raise DataError("sequences carry no actor information")
            keep = [i for i, a in enumerate(seq.actors) if a == actor]
            if not keep:
                continue
            seq = replace(
                seq,
                states=tuple(seq.states[i] for i in keep),
                actors=tuple(seq.actors[i] for i in keep),
                times=None if seq.times is None else tuple(seq.times[i] for i in keep),
            )
        out.append(seq)
    if not out:
        parts = []
        if unit is not None:
            parts.append(f"unit={unit!r}")
        if actor is not None:
            parts.append(f"actor={actor!r}")
        if predicate is not None:
            parts.append(f"predicate={getattr(predicate, '__name__', 'predicate')}")
        raise EmptySelectionError(f"selection {', '.join(parts)} matched no sequences")
    return out


def merge_units(sequences: Sequence[StateSequence]) -> list[StateSequence]:
    """Concatenate each unit's sessions into one sequence (per-unit tallying)."""
    groups: dict[str, list[StateSequence]] = defaultdict(list)
    for seq in sequences:
        groups[seq.unit_id].append(seq)
    out = []
    for unit, seqs in groups.items():
        has_times = all(s.times is not None for s in seqs)
        has_actors = all(s.actors is not None for s in seqs)
        out.append(StateSequence(
            unit_id=unit,
            session_id=0,
            states=tuple(x for s in seqs for x in s.states),
            covariates=dict(seqs[0].covariates),
            times=tuple(t for s in seqs for t in s.times) if has_times else None,
            actors=tuple(a for s in seqs for a in s.actors) if has_actors else None,
            attrs=dict(seqs[0].attrs),
        ))
    return out


def load_covariates(source, unit_column: str = "unit", columns: Sequence[str] | None = None,
                    delimiter: str = ",") -> dict[str, dict[str, float]]:
    """Read a per-unit covariate table (one row per unit, numeric columns)."""
    stream, owned = _open_text(source)
    try:
        reader = csv.DictReader(stream, delimiter=delimiter)
        if reader.fieldnames is None:
            raise DataError("covariate file is empty")
        fields = [f.strip() for f in reader.fieldnames]
        reader.fieldnames = fields
        if unit_column not in fields:
            raise SchemaError(unit_column, fields)
        names = list(columns) if columns is not None else [f for f in fields if f != unit_column]
        for name in names:
            if name not in fields:
                raise SchemaError(name, fields)
        table: dict[str, dict[str, float]] = {}
        for lineno, row in enumerate(reader, start=2):
            unit = row[unit_column].strip()
            if unit in table:
                raise RowError(lineno, f"duplicate covariate row for unit {unit!r}")
            values = {}
            for name in names:
                try:
                    values[name] = float(row[name])
                except (TypeError, ValueError):
                    raise RowError(lineno, f"non-numeric value {row[name]!r} in column {name!r}") from None
                if not math.isfinite(values[name]):
                    raise RowError(lineno, f"non-finite value in column {name!r}")
            table[unit] = values
    finally:
        if owned:
            stream.close()
    return table


def attach_covariates(sequences: Sequence[StateSequence],
                      table: Mapping[str, Mapping[str, float]]) -> list[StateSequence]:
    missing = sorted({s.unit_id for s in sequences} - set(table))
    if missing:
        raise DataError(f"no covariate row for units: {', '.join(missing)}")
    return [replace(s, covariates=dict(table[s.unit_id])) for s in sequences]


def group_sequences(sequences: Sequence[StateSequence], key: str) -> dict[str, list[StateSequence]]:
    """Partition sequences by a unit attribute or covariate value."""
    groups: dict[str, list[StateSequence]] = {}
    for seq in sequences:
        if key in seq.attrs:
            value = str(seq.attrs[key]).strip()
        elif key in seq.covariates:
            value = format(seq.covariates[key], "g")
        else:
            raise DataError(f"unit {seq.unit_id!r} has no value for group column {key!r}")
        groups.setdefault(value, []).append(seq)
    return groups
