"""Segment predictions to events, AHI and paediatric severity class."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

from .errors import EventsError

DEFAULT_THRESHOLD = 0.5


class Severity(str, Enum):
    NORMAL_MILD = "normal_mild"
    MODERATE = "moderate"
    SEVERE = "severe"


@dataclass(frozen=True)
class PredictedEvent:
    start_s: float
    end_s: float


@dataclass
class AhiReport:
    event_count: int
    sleep_time_h: float
    ahi: float
    severity: Severity


def group_segments(predictions: Sequence[tuple], threshold: float = DEFAULT_THRESHOLD
                   ) -> list[PredictedEvent]:
    """Merge positive windows that overlap or touch into events.

    ``predictions`` holds (window, y_hat) pairs ordered by window start; a
    window is anything with ``start_s`` and ``end_s``.
    """
    events: list[PredictedEvent] = []
    cur = None
    last_start = float("-inf")
    for window, y_hat in predictions:
        if window.start_s < last_start:
            raise EventsError("predictions must be ordered by window start")
        last_start = window.start_s
        if y_hat < threshold:
            continue
        if cur is not None and window.start_s <= cur[1]:
            cur[1] = max(cur[1], window.end_s)
        else:
            if cur is not None:
                events.append(PredictedEvent(*cur))
            cur = [window.start_s, window.end_s]
    if cur is not None:
        events.append(PredictedEvent(*cur))
    return events


def classify_severity(ahi: float) -> Severity:
    if ahi < 0:
        raise EventsError(f"negative AHI {ahi}")
    if ahi < 5:
        return Severity.NORMAL_MILD
    if ahi <= 10:
        return Severity.MODERATE
    return Severity.SEVERE


def compute_ahi(events: Sequence, sleep_time_h: float) -> AhiReport:
    if not sleep_time_h > 0:
        raise EventsError(f"sleep time must be positive, got {sleep_time_h}")
    ahi = len(events) / sleep_time_h
    return AhiReport(len(events), sleep_time_h, ahi, classify_severity(ahi))


def write_night_report(path: str | Path, night_id: str, events: Sequence[PredictedEvent],
                       report: AhiReport, threshold: float) -> None:
    doc = {
        "night_id": night_id,
        "threshold": threshold,
        "events": [asdict(e) for e in events],
        "event_count": report.event_count,
        "sleep_time_h": report.sleep_time_h,
        "ahi": report.ahi,
        "severity": report.severity.value,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
