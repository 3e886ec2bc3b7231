"""SpO2 baseline, desaturation labels and airflow-to-desaturation delays."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import PhysioError

DESAT_DROP_PCT = 3.0
LABEL_WINDOW_S = 15.0
DELAY_HORIZON_S = 60.0
MIN_BASELINE_S = 600.0
VALID_RANGE = (50.0, 100.0)
MAX_MISSING = 0.5


@dataclass
class Spo2Trace:
    """Uniformly sampled SpO2; NaN marks a missing sample."""

    v: np.ndarray
    rate_hz: float = 1.0
    t0: float = 0.0

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.rate_hz <= 0:
            raise PhysioError("sample rate must be positive")

    @property
    def t(self) -> np.ndarray:
        return self.t0 + np.arange(len(self.v)) / self.rate_hz

    @property
    def end_s(self) -> float:
        return self.t0 + len(self.v) / self.rate_hz

    @property
    def valid(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return ~np.isnan(self.v) & (self.v >= VALID_RANGE[0]) & (self.v <= VALID_RANGE[1])

    @property
    def missing_fraction(self) -> float:
        if len(self.v) == 0:
            return 1.0
        return 1.0 - self.valid.mean()

    def index_range(self, lo: float, hi: float) -> tuple[int, int]:
        """Half-open sample index range of samples with lo <= t <= hi."""
        a = int(np.ceil((lo - self.t0) * self.rate_hz - 1e-9))
        b = int(np.floor((hi - self.t0) * self.rate_hz + 1e-9)) + 1
        return max(a, 0), min(b, len(self.v))


@dataclass(frozen=True)
class BaselineModel:
    baseline_pct: float
    method: str = "mode-int"

    def threshold(self, drop: float = DESAT_DROP_PCT) -> float:
        return self.baseline_pct - drop


@dataclass
class DelayEstimate:
    per_event: list[float]
    night_median_s: float | None
    source: str = "night_specific"
    skipped: int = 0


def compute_baseline(trace: Spo2Trace) -> BaselineModel:
    """Modal integer saturation over valid samples; ties go to the higher value."""
    valid = trace.valid
    if valid.sum() / trace.rate_hz < MIN_BASELINE_S:
        raise PhysioError("insufficient valid SpO2 data for a baseline (need 10 min)")
    values, counts = np.unique(np.rint(trace.v[valid]).astype(int), return_counts=True)
    best = values[counts == counts.max()].max()
    if not 70 <= best <= 100:
        raise PhysioError(f"implausible SpO2 baseline {best}%")
    return BaselineModel(float(best))


def desat_fraction(trace: Spo2Trace, baseline: BaselineModel, window_center_s: float,
                   drop: float = DESAT_DROP_PCT, width_s: float = LABEL_WINDOW_S) -> float | None:
    """Fraction of valid samples in the window at or below baseline - drop.

    Returns None (unlabelled) when more than half the window is missing.
    """
    lo, hi = window_center_s - width_s / 2, window_center_s + width_s / 2
    if lo < trace.t0 - 1e-9 or hi > trace.end_s + 1e-9:
        raise PhysioError(f"window [{lo:g}, {hi:g}] s outside trace")
    a, b = trace.index_range(lo, hi)
    if b <= a:
        raise PhysioError("window contains no samples")
    valid = trace.valid[a:b]
    if valid.sum() < MAX_MISSING * (b - a) or not valid.any():
        return None
    below = trace.v[a:b][valid] <= baseline.threshold(drop)
    return float(below.sum() / valid.sum())


def _onset(event) -> float:
    return float(getattr(event, "start_s", event))


def estimate_event_delays(trace: Spo2Trace, baseline: BaselineModel, annotations: Iterable,
                          horizon_s: float = DELAY_HORIZON_S,
                          drop: float = DESAT_DROP_PCT) -> DelayEstimate:
    """Delay from each event onset to the first sample at or below baseline - drop."""
    onsets = [_onset(e) for e in annotations]
    if not onsets:
        raise PhysioError("no annotated events")
    threshold = baseline.threshold(drop)
    valid = trace.valid
    delays, skipped, overlapping = [], 0, 0
    for onset in onsets:
        a, b = trace.index_range(onset, onset + horizon_s)
        if onset < trace.t0 or b <= a:
            skipped += 1
            continue
        overlapping += 1
        ok = valid[a:b]
        if ok.sum() < MAX_MISSING * (b - a):
            skipped += 1
            continue
        hits = np.flatnonzero(ok & (np.nan_to_num(trace.v[a:b], nan=np.inf) <= threshold))
        if hits.size == 0:
            skipped += 1
            continue
        t_ood = trace.t0 + (a + hits[0]) / trace.rate_hz
        delays.append(max(0.0, float(t_ood - onset)))
    if overlapping == 0:
        raise PhysioError("no event overlaps the SpO2 trace")
    median = float(np.median(delays)) if delays else None
    return DelayEstimate(delays, median, "night_specific", skipped)


def global_median_delay(nights: Sequence[DelayEstimate]) -> float:
    pooled = [d for n in nights for d in n.per_event]
    if not pooled:
        raise PhysioError("no estimable event delays in any night")
    return float(np.median(pooled))


def delayed_label(trace: Spo2Trace, baseline: BaselineModel, segment, delay_s: float,
                  drop: float = DESAT_DROP_PCT) -> float | None:
    """Desaturation label for a segment, read from a window shifted by delay_s."""
    try:
        return desat_fraction(trace, baseline, segment.center_s + delay_s, drop)
    except PhysioError:
        return None


def delay_sweep(trace: Spo2Trace, baseline: BaselineModel, windows, classes: Sequence[str],
                delays: Sequence[float]) -> dict[str, np.ndarray]:
    """Mean desaturation fraction per segment class at each candidate delay.

    Unlabelled windows are ignored; classes with no labelled window give NaN.
    """
    names = sorted(set(classes))
    out = {c: np.full(len(delays), np.nan) for c in names}
    for j, d in enumerate(delays):
        labels = np.array([np.nan if (s := delayed_label(trace, baseline, w, d)) is None else s
                           for w in windows])
        for c in names:
            sel = labels[np.array([k == c for k in classes])]
            sel = sel[~np.isnan(sel)]
            if sel.size:
                out[c][j] = sel.mean()
    return out


def read_spo2_csv(path: str | Path) -> Spo2Trace:
    path = Path(path)
    t, v = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["time_s", "spo2_pct"]:
            raise PhysioError(f"{path}: expected header 'time_s,spo2_pct'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                t.append(float(row[0]))
                v.append(float(row[1]) if len(row) > 1 and row[1].strip() else np.nan)
            except ValueError as exc:
                raise PhysioError(f"{path}:{lineno}: {exc}") from None
    if len(t) < 2:
        raise PhysioError(f"{path}: fewer than two samples")
    t = np.asarray(t)
    dt = np.diff(t)
    if np.ptp(dt) > 1e-6 * max(1.0, dt.mean()) or dt.mean() <= 0:
        raise PhysioError(f"{path}: SpO2 samples are not uniformly spaced")
    return Spo2Trace(np.asarray(v), rate_hz=1.0 / dt.mean(), t0=float(t[0]))


def write_spo2_csv(path: str | Path, trace: Spo2Trace) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("time_s,spo2_pct\n")
        for ti, vi in zip(trace.t, trace.v):
            fh.write(f"{ti:g},{'' if np.isnan(vi) else f'{vi:g}'}\n")
