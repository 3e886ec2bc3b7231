"""Night manifests, segment labelling and cross-patient fold planning."""
from __future__ import annotations

import csv
import json
import wave
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dsp, physio
from .errors import DatasetError, OsaError

MIN_OVERLAP_S = 5.0
MANIFEST_KEYS = ("patient_id", "night_id", "wav", "spo2_csv", "events_csv",
                 "sleep_time_h", "sex", "age_y", "bmi")
REQUIRED_KEYS = ("patient_id", "night_id", "wav", "spo2_csv", "events_csv")


class EventKind(str, Enum):
    APNOEA = "apnea"
    HYPOPNOEA = "hypopnea"


class DelayMode(str, Enum):
    NONE = "none"
    FIXED_GLOBAL = "fixed_global"
    NIGHT_SPECIFIC = "night_specific"

    @classmethod
    def parse(cls, value: "str | DelayMode | None") -> "DelayMode":
        if isinstance(value, cls):
            return value
        aliases = {None: cls.NONE, "": cls.NONE, "none": cls.NONE, "fd": cls.FIXED_GLOBAL,
                   "fixed_global": cls.FIXED_GLOBAL, "sd": cls.NIGHT_SPECIFIC,
                   "night_specific": cls.NIGHT_SPECIFIC}
        key = value.lower() if isinstance(value, str) else value
        if key not in aliases:
            raise DatasetError(f"unknown delay mode {value!r}")
        return aliases[key]


@dataclass(frozen=True)
class EventAnnotation:
    kind: EventKind
    start_s: float
    end_s: float

    def __post_init__(self):
        if not self.end_s > self.start_s:
            raise DatasetError(f"event end {self.end_s} not after start {self.start_s}")


@dataclass
class NightRecord:
    patient_id: str
    night_id: str
    wav: Path | None
    spo2_csv: Path | None
    events_csv: Path | None
    annotations: list[EventAnnotation]
    sleep_time_h: float
    sex: str | None = None
    age_y: float | None = None
    bmi: float | None = None
    snr_db: float | None = None
    sleep_time_from_duration: bool = False
    extra: dict = field(default_factory=dict)

    def load_audio(self) -> dsp.AudioNight:
        return read_wav(self.wav)

    def load_spo2(self) -> physio.Spo2Trace:
        return physio.read_spo2_csv(self.spo2_csv)


@dataclass(frozen=True)
class SegmentSample:
    night_id: str
    window: dsp.SegmentWindow
    y: int
    s: float | None = None
    kind: str = "none"  # strongest overlapping event kind, for delay analysis


@dataclass
class FoldPlan:
    folds: list[list[str]]
    seed: int

    def test_ids(self, i: int) -> list[str]:
        return list(self.folds[i])

    def train_ids(self, i: int) -> list[str]:
        return [n for j, f in enumerate(self.folds) if j != i for n in f]

    def __len__(self) -> int:
        return len(self.folds)


def read_wav_header(path: Path) -> tuple[int, int, int, int]:
    """(sample_rate, channels, sample_width_bytes, frame_count)."""
    try:
        with wave.open(str(path), "rb") as w:
            return w.getframerate(), w.getnchannels(), w.getsampwidth(), w.getnframes()
    except (wave.Error, EOFError) as exc:
        raise DatasetError(f"{path}: unreadable WAV ({exc})") from None


def _check_wav(path: Path) -> tuple[int, int, int, int]:
    rate, channels, width, frames = read_wav_header(path)
    if rate != dsp.SAMPLE_RATE:
        raise DatasetError(f"{path}: unsupported sample rate {rate} Hz (need {dsp.SAMPLE_RATE})")
    if channels != 1 or width != 2:
        raise DatasetError(f"{path}: need mono 16-bit PCM, got {channels} ch x {8 * width} bit")
    return rate, channels, width, frames


def read_wav(path: str | Path) -> dsp.AudioNight:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"missing audio file: {path}")
    _check_wav(path)
    with wave.open(str(path), "rb") as w:
        data = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    return dsp.AudioNight(data.astype(np.int16))


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int = dsp.SAMPLE_RATE) -> None:
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(np.asarray(samples, dtype="<i2").tobytes())


def read_events_csv(path: str | Path) -> list[EventAnnotation]:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"missing annotation file: {path}")
    events = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) < {"kind", "start_s", "end_s"}:
            raise DatasetError(f"{path}: expected header 'kind,start_s,end_s'")
        for lineno, row in enumerate(reader, start=2):
            try:
                events.append(EventAnnotation(EventKind(row["kind"].strip()),
                                              float(row["start_s"]), float(row["end_s"])))
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
    return events


def write_events_csv(path: str | Path, events: Sequence[EventAnnotation]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("kind,start_s,end_s\n")
        for e in events:
            fh.write(f"{EventKind(e.kind).value},{e.start_s:g},{e.end_s:g}\n")


def _iter_json_array(text: str, path: Path):
    """Yield (line_number, element) for each element of a top-level JSON array."""
    dec = json.JSONDecoder()
    pos = len(text) - len(text.lstrip())
    if not text.startswith("[", pos):
        raise DatasetError(f"{path}: manifest must be a JSON array")
    pos += 1
    while True:
        while pos < len(text) and text[pos] in " \t\r\n,":
            pos += 1
        if pos >= len(text):
            raise DatasetError(f"{path}: unterminated JSON array")
        if text[pos] == "]":
            return
        line = text.count("\n", 0, pos) + 1
        try:
            obj, pos = dec.raw_decode(text, pos)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
        yield line, obj


def load_manifest(path: str | Path) -> list[NightRecord]:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"missing manifest: {path}")
    root = path.parent
    nights, seen = [], set()
    for line, obj in _iter_json_array(path.read_text(), path):
        where = f"{path}:{line}"
        if not isinstance(obj, dict):
            raise DatasetError(f"{where}: night entry must be an object")
        missing = [k for k in REQUIRED_KEYS if k not in obj]
        if missing:
            raise DatasetError(f"{where}: missing keys {missing}")
        if obj["night_id"] in seen:
            raise DatasetError(f"{where}: duplicate night_id {obj['night_id']!r}")
        seen.add(obj["night_id"])
        files = {k: root / obj[k] for k in ("wav", "spo2_csv", "events_csv")}
        for f in files.values():
            if not f.exists():
                raise DatasetError(f"{where}: referenced file does not exist: {f}")
        try:
            _, _, _, frames = _check_wav(files["wav"])
        except DatasetError as exc:
            raise DatasetError(f"{where}: {exc}") from None
        duration_h = frames / dsp.SAMPLE_RATE / 3600
        sleep = obj.get("sleep_time_h")
        flagged = sleep is None
        try:
            sleep = duration_h if flagged else float(sleep)
        except (TypeError, ValueError):
            raise DatasetError(f"{where}: sleep_time_h must be a number") from None
        if sleep <= 0:
            raise DatasetError(f"{where}: sleep_time_h must be positive")
        annotations = read_events_csv(files["events_csv"])
        for e in annotations:
            if e.start_s < 0 or e.end_s > duration_h * 3600 + 1e-6:
                raise DatasetError(f"{where}: event {e.start_s:g}-{e.end_s:g} s outside recording")
        nights.append(NightRecord(
            patient_id=str(obj["patient_id"]), night_id=str(obj["night_id"]),
            annotations=annotations, sleep_time_h=sleep, sleep_time_from_duration=flagged,
            sex=obj.get("sex"), age_y=obj.get("age_y"), bmi=obj.get("bmi"),
            snr_db=obj.get("snr_db"),
            extra={k: v for k, v in obj.items() if k not in MANIFEST_KEYS and k != "snr_db"},
            **files))
    return nights


def write_manifest(path: str | Path, entries: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        fh.write("[\n")
        for i, e in enumerate(entries):
            fh.write("  " + json.dumps(e, sort_keys=True) + (",\n" if i < len(entries) - 1 else "\n"))
        fh.write("]\n")


def _overlap(a0, a1, b0, b1) -> float:
    return max(0.0, min(a1, b1) - max(a0, b0))


def label_segments(night: NightRecord, windows: Sequence[dsp.SegmentWindow],
                   min_overlap_s: float = MIN_OVERLAP_S) -> list[SegmentSample]:
    out = []
    for w in windows:
        kind, y = "none", 0
        for e in night.annotations:
            if _overlap(w.start_s, w.end_s, e.start_s, e.end_s) >= min_overlap_s:
                y = 1
                if EventKind(e.kind) is EventKind.APNOEA:
                    kind = EventKind.APNOEA.value
                elif kind == "none":
                    kind = EventKind.HYPOPNOEA.value
        out.append(SegmentSample(night.night_id, w, y, None, kind))
    return out


def attach_spo2_labels(samples: Sequence[SegmentSample], trace: physio.Spo2Trace,
                       baseline: physio.BaselineModel, delay_mode="none",
                       night_delay_s: float | None = None,
                       global_delay_s: float | None = None) -> list[SegmentSample]:
    """Fill ``s`` using no delay, the cohort median (FD) or the night median (SD).

    Under SD a night without an estimable delay falls back to the global median.
    """
    mode = DelayMode.parse(delay_mode)
    if mode is DelayMode.NONE:
        delay = 0.0
    elif mode is DelayMode.FIXED_GLOBAL:
        if global_delay_s is None:
            raise DatasetError("fixed_global delay mode needs a global median delay")
        delay = global_delay_s
    else:
        delay = night_delay_s if night_delay_s is not None else global_delay_s
        if delay is None:
            raise DatasetError("night_specific delay mode needs a night or global delay")
    return [replace(smp, s=physio.delayed_label(trace, baseline, smp.window, delay))
            for smp in samples]


def make_folds(nights: Sequence[NightRecord], k: int = 5, seed: int = 0) -> FoldPlan:
    """Patient-disjoint folds, balanced by night count."""
    if len(nights) < k:
        raise DatasetError(f"need at least {k} nights for {k} folds, got {len(nights)}")
    groups: dict[str, list[str]] = {}
    for n in nights:
        groups.setdefault(n.patient_id, []).append(n.night_id)
    patients = sorted(groups)
    if len(patients) < k:
        raise DatasetError(f"need at least {k} patients for {k} folds, got {len(patients)}")
    order = np.random.default_rng(seed).permutation(len(patients))
    shuffled = [patients[i] for i in order]
    shuffled.sort(key=lambda p: -len(groups[p]))  # stable: keeps shuffled order within ties
    folds: list[list[str]] = [[] for _ in range(k)]
    for p in shuffled:
        target = min(range(k), key=lambda j: len(folds[j]))
        folds[target].extend(groups[p])
    return FoldPlan(folds, seed)


def compute_snr(audio: dsp.AudioNight, frame_s: float = 0.05) -> float | None:
    """Snore-to-non-snore ratio in dB.

    Snore frames are the top decile of short-term energy; the ratio compares
    their mean power to the mean power of all remaining frames.
    """
    n = int(frame_s * audio.sample_rate)
    count = len(audio.samples) // n
    if count < 10:
        return None
    x = audio.samples[:count * n].astype(np.float64).reshape(count, n)
    power = (x ** 2).mean(axis=1)
    order = np.sort(power)
    top = int(np.ceil(0.1 * count))
    rest = order[:-top].mean()
    snore = order[-top:].mean()
    if rest <= 0 or snore <= 0:
        return None
    return float(10 * np.log10(snore / rest))


@dataclass
class NightData:
    """Everything training and evaluation need from one night, loaded once."""

    record: NightRecord
    features: dsp.NightFeatures
    samples: list[SegmentSample]
    trace: physio.Spo2Trace
    baseline: physio.BaselineModel | None
    delays: physio.DelayEstimate | None

    @property
    def night_id(self) -> str:
        return self.record.night_id

    @property
    def y(self) -> np.ndarray:
        return np.array([s.y for s in self.samples], dtype=np.float32)

    def s_labels(self, delay_s: float) -> np.ndarray:
        """Desaturation labels for every segment at a given delay; NaN = unlabelled."""
        if self.baseline is None:
            return np.full(len(self.samples), np.nan, dtype=np.float32)
        labels = attach_spo2_labels(self.samples, self.trace, self.baseline,
                                    DelayMode.FIXED_GLOBAL, global_delay_s=delay_s)
        return np.array([np.nan if s.s is None else s.s for s in labels], dtype=np.float32)


def prepare_night(record: NightRecord, audio: dsp.AudioNight | None = None,
                  trace: physio.Spo2Trace | None = None) -> NightData:
    """Load (or take) a night's audio and SpO2 and derive features, labels and delays."""
    features = dsp.extract_features(audio if audio is not None else record.load_audio())
    samples = label_segments(record, features.windows)
    trace = trace if trace is not None else record.load_spo2()
    try:
        baseline = physio.compute_baseline(trace)
    except OsaError:
        baseline = None
    delays = None
    if baseline is not None and record.annotations:
        try:
            delays = physio.estimate_event_delays(trace, baseline, record.annotations)
        except OsaError:
            delays = None
    return NightData(record, features, samples, trace, baseline, delays)
