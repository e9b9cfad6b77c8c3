"""Ingestion and repair of arrival/departure sensor logs.

Raw logs are per-spot streams of arrival and departure events. Sensors
occasionally drop events (e.g. two arrivals with no departure in between),
so a log is repaired to strict arrival/departure alternation before stays
or occupancy traces are derived from it. A missing event is inserted at the
midpoint of the two events that bracket it; an unmatched event at a log
boundary is closed at the span endpoint.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "EventKind",
    "ParkingEvent",
    "BadRow",
    "EventLog",
    "StayRecord",
    "RepairReport",
    "OccupancyTrace",
    "MissingHeader",
    "BadTimestamp",
    "BadKind",
    "UnrepairedLog",
    "parse_event_log",
    "event_log_to_csv",
    "repair_log",
    "filter_spots",
    "stays_from_log",
    "log_from_stays",
    "occupancy_from_stays",
    "occupancy_trace",
    "split_by_location",
    "stays_to_csv",
    "parse_stays_csv",
]

CSV_HEADER = ["location_id", "spot_id", "timestamp", "kind"]
STAYS_HEADER = ["spot_id", "arrival_time", "departure_time", "service_time"]


class MissingHeader(ValueError):
    """The CSV input does not start with the expected header row."""


class BadTimestamp(ValueError):
    """A row carries a timestamp that is not a finite non-negative number."""

    def __init__(self, row: int, value: str):
        self.row = row
        self.value = value
        super().__init__(f"row {row}: bad timestamp {value!r}")


class BadKind(ValueError):
    """A row carries an event kind other than arrival/departure."""

    def __init__(self, row: int, value: str):
        self.row = row
        self.value = value
        super().__init__(f"row {row}: bad kind {value!r}")


class UnrepairedLog(ValueError):
    """Stays were requested from a log that does not alternate per spot."""


class EventKind(Enum):
    ARRIVAL = "arrival"
    DEPARTURE = "departure"


@dataclass(frozen=True)
class ParkingEvent:
    location_id: str
    spot_id: str
    timestamp: float
    kind: EventKind
    synthetic: bool = False


@dataclass(frozen=True)
class BadRow:
    row: int
    reason: str
    raw: str


@dataclass
class EventLog:
    """Events sorted by (spot_id, timestamp) plus the observation span."""

    events: list[ParkingEvent]
    span: tuple[float, float]
    bad_rows: list[BadRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.events)

    def spot_ids(self) -> list[str]:
        return sorted({ev.spot_id for ev in self.events})

    def by_spot(self) -> dict[str, list[ParkingEvent]]:
        out: dict[str, list[ParkingEvent]] = {}
        for ev in self.events:
            out.setdefault(ev.spot_id, []).append(ev)
        return out

    def arrival_times(self) -> np.ndarray:
        """All arrival timestamps pooled across spots, time-sorted."""
        return np.sort(
            np.array(
                [ev.timestamp for ev in self.events if ev.kind is EventKind.ARRIVAL],
                dtype=float,
            )
        )


@dataclass(frozen=True)
class StayRecord:
    spot_id: str
    arrival_time: float
    departure_time: float

    @property
    def service_time(self) -> float:
        return self.departure_time - self.arrival_time


@dataclass
class RepairReport:
    inserted_events: int
    total_events: int
    boundary_events: int
    per_spot: dict[str, int]

    @property
    def inserted_fraction(self) -> float:
        if self.total_events == 0:
            return 0.0
        return self.inserted_events / self.total_events


@dataclass
class OccupancyTrace:
    times: np.ndarray
    counts: np.ndarray


def _parse_kind(text: str) -> EventKind:
    lowered = text.strip().lower()
    if lowered == "arrival":
        return EventKind.ARRIVAL
    if lowered == "departure":
        return EventKind.DEPARTURE
    raise ValueError(text)


def parse_event_log(
    text: str | bytes,
    *,
    strict: bool = False,
    span: tuple[float, float] | None = None,
) -> EventLog:
    """Parse CSV with header ``location_id,spot_id,timestamp,kind``.

    Malformed rows are collected on ``EventLog.bad_rows`` rather than dropped
    silently; with ``strict=True`` the first malformed row raises instead.
    ``span`` defaults to the min/max timestamp seen (``(0, 0)`` when empty).
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise MissingHeader("empty input, expected header row") from None
    if [h.strip().lower() for h in header] != CSV_HEADER:
        raise MissingHeader(f"expected header {','.join(CSV_HEADER)}, got {','.join(header)}")

    events: list[ParkingEvent] = []
    bad: list[BadRow] = []
    for row_no, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != 4:
            if strict:
                raise BadKind(row_no, ",".join(row))
            bad.append(BadRow(row_no, "wrong field count", ",".join(row)))
            continue
        location_id, spot_id, ts_text, kind_text = (cell.strip() for cell in row)
        try:
            ts = float(ts_text)
        except ValueError:
            ts = float("nan")
        if not np.isfinite(ts) or ts < 0:
            if strict:
                raise BadTimestamp(row_no, ts_text)
            bad.append(BadRow(row_no, "bad timestamp", ",".join(row)))
            continue
        try:
            kind = _parse_kind(kind_text)
        except ValueError:
            if strict:
                raise BadKind(row_no, kind_text)
            bad.append(BadRow(row_no, "bad kind", ",".join(row)))
            continue
        events.append(ParkingEvent(location_id, spot_id, ts, kind))

    events.sort(key=lambda ev: (ev.spot_id, ev.timestamp))
    if span is None:
        if events:
            stamps = [ev.timestamp for ev in events]
            span = (min(stamps), max(stamps))
        else:
            span = (0.0, 0.0)
    return EventLog(events=events, span=span, bad_rows=bad)


def _format_ts(value: float) -> str:
    return repr(float(value))


def event_log_to_csv(log: EventLog) -> str:
    """Serialize back to the ingestion schema, events in time order per spot."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for ev in log.events:
        writer.writerow([ev.location_id, ev.spot_id, _format_ts(ev.timestamp), ev.kind.value])
    return out.getvalue()


def repair_log(log: EventLog) -> tuple[EventLog, RepairReport]:
    """Restore strict arrival/departure alternation for every spot.

    A missing event between two same-kind neighbours is inserted at their
    midpoint. A leading departure gets a synthetic arrival at span start and
    a trailing arrival gets a synthetic departure at span end; those boundary
    closures are counted separately in the report because the midpoint rule
    does not cover them.
    """
    lo, hi = log.span
    repaired: list[ParkingEvent] = []
    per_spot: dict[str, int] = {}
    inserted = 0
    boundary = 0

    for spot_id, events in log.by_spot().items():
        fixed: list[ParkingEvent] = []
        expected = EventKind.ARRIVAL
        prev_ts: float | None = None
        for ev in events:
            if ev.kind is not expected:
                ts = lo if prev_ts is None else 0.5 * (prev_ts + ev.timestamp)
                if prev_ts is None:
                    boundary += 1
                fixed.append(
                    ParkingEvent(ev.location_id, spot_id, ts, expected, synthetic=True)
                )
                inserted += 1
                per_spot[spot_id] = per_spot.get(spot_id, 0) + 1
            fixed.append(ev)
            expected = (
                EventKind.DEPARTURE if ev.kind is EventKind.ARRIVAL else EventKind.ARRIVAL
            )
            prev_ts = ev.timestamp
        if fixed and fixed[-1].kind is EventKind.ARRIVAL:
            fixed.append(
                ParkingEvent(fixed[-1].location_id, spot_id, hi, EventKind.DEPARTURE, synthetic=True)
            )
            inserted += 1
            boundary += 1
            per_spot[spot_id] = per_spot.get(spot_id, 0) + 1
        repaired.extend(fixed)

    report = RepairReport(
        inserted_events=inserted,
        total_events=len(repaired),
        boundary_events=boundary,
        per_spot=per_spot,
    )
    return EventLog(events=repaired, span=log.span, bad_rows=list(log.bad_rows)), report


def _completed_stays_per_spot(log: EventLog) -> dict[str, int]:
    counts: dict[str, int] = {}
    for spot_id, events in log.by_spot().items():
        open_arrival = False
        n = 0
        for ev in events:
            if ev.kind is EventKind.ARRIVAL:
                open_arrival = True
            elif open_arrival:
                n += 1
                open_arrival = False
        counts[spot_id] = n
    return counts


def filter_spots(log: EventLog, min_stays: int = 2) -> EventLog:
    """Keep only spots with at least ``min_stays`` completed stays in the span."""
    if min_stays < 1:
        raise ValueError("min_stays must be >= 1")
    counts = _completed_stays_per_spot(log)
    keep = {spot for spot, n in counts.items() if n >= min_stays}
    events = [ev for ev in log.events if ev.spot_id in keep]
    return EventLog(events=events, span=log.span, bad_rows=list(log.bad_rows))


def stays_from_log(log: EventLog) -> list[StayRecord]:
    """Pair alternating events into stays, sorted by arrival time.

    Raises UnrepairedLog when any spot violates alternation; run repair_log
    first.
    """
    stays: list[StayRecord] = []
    for spot_id, events in log.by_spot().items():
        if len(events) % 2 != 0:
            raise UnrepairedLog(f"spot {spot_id}: odd event count {len(events)}")
        for i in range(0, len(events), 2):
            first, second = events[i], events[i + 1]
            if first.kind is not EventKind.ARRIVAL or second.kind is not EventKind.DEPARTURE:
                raise UnrepairedLog(f"spot {spot_id}: alternation violated near index {i}")
            stays.append(StayRecord(spot_id, first.timestamp, second.timestamp))
    stays.sort(key=lambda s: (s.arrival_time, s.spot_id))
    return stays


def log_from_stays(
    stays: Sequence[StayRecord],
    location_id: str = "sim",
    span: tuple[float, float] | None = None,
) -> EventLog:
    """Inverse of stays_from_log; handy for building fixtures and simulator output."""
    events: list[ParkingEvent] = []
    for stay in stays:
        events.append(ParkingEvent(location_id, stay.spot_id, stay.arrival_time, EventKind.ARRIVAL))
        events.append(ParkingEvent(location_id, stay.spot_id, stay.departure_time, EventKind.DEPARTURE))
    events.sort(key=lambda ev: (ev.spot_id, ev.timestamp))
    if span is None:
        if events:
            stamps = [ev.timestamp for ev in events]
            span = (min(stamps), max(stamps))
        else:
            span = (0.0, 0.0)
    return EventLog(events=events, span=span)


def occupancy_from_stays(stays: Sequence[StayRecord], times: np.ndarray) -> np.ndarray:
    """Count stays with arrival <= t < departure at each probe time."""
    arrivals = np.sort(np.array([s.arrival_time for s in stays], dtype=float))
    departures = np.sort(np.array([s.departure_time for s in stays], dtype=float))
    times = np.asarray(times, dtype=float)
    n_arr = np.searchsorted(arrivals, times, side="right")
    n_dep = np.searchsorted(departures, times, side="right")
    return (n_arr - n_dep).astype(int)


def occupancy_trace(log: EventLog, grid_step: float) -> OccupancyTrace:
    """Occupancy N(t) on a regular grid over the log span.

    The log must be repaired (alternation holds); counts are exact indicator
    sums, a departure at exactly t is no longer counted at t.
    """
    if grid_step <= 0:
        raise ValueError("grid_step must be positive")
    lo, hi = log.span
    n_steps = int(np.floor((hi - lo) / grid_step)) + 1 if hi >= lo else 0
    times = lo + grid_step * np.arange(max(n_steps, 1))
    stays = stays_from_log(log)
    return OccupancyTrace(times=times, counts=occupancy_from_stays(stays, times))


def split_by_location(log: EventLog) -> dict[str, EventLog]:
    groups: dict[str, list[ParkingEvent]] = {}
    for ev in log.events:
        groups.setdefault(ev.location_id, []).append(ev)
    return {
        loc: EventLog(events=evs, span=log.span, bad_rows=[])
        for loc, evs in sorted(groups.items())
    }


def stays_to_csv(stays: Sequence[StayRecord]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(STAYS_HEADER)
    for stay in stays:
        writer.writerow(
            [
                stay.spot_id,
                _format_ts(stay.arrival_time),
                _format_ts(stay.departure_time),
                _format_ts(stay.service_time),
            ]
        )
    return out.getvalue()


def parse_stays_csv(text: str) -> list[StayRecord]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise MissingHeader("empty stays input") from None
    if [h.strip().lower() for h in header] != STAYS_HEADER:
        raise MissingHeader(f"expected header {','.join(STAYS_HEADER)}")
    stays = []
    for row in reader:
        if not row:
            continue
        stays.append(StayRecord(row[0], float(row[1]), float(row[2])))
    return stays
