"""Synthetic subject-nights with exact ground truth.

Audio is a breathing-modulated band-limited noise "snore" over white noise;
apnoeas silence the breathing sound, hypopnoeas attenuate it. SpO2 is sampled
at 1 Hz and dips a planted delay after each event onset. Child-like nights
breathe faster and snore at a higher pitch than adult-like nights.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.signal import butter, sosfilt

from . import dsp
from .dataset import (EventAnnotation, EventKind, NightData, NightRecord, compute_snr,
                      prepare_night, write_events_csv, write_manifest, write_wav)
from .errors import SynthError
from .physio import Spo2Trace, write_spo2_csv

COHORTS = {
    # breathing rate (breaths/min), snore band centre (Hz), event length range (s),
    # residual snore gain inside apnoeas / hypopnoeas
    "adult": {"breath_rate": 14.0, "snore_hz": 300.0, "event_s": (15.0, 40.0),
              "gain": (0.05, 0.4), "age": (25, 70), "bmi": (22, 40)},
    "child": {"breath_rate": 24.0, "snore_hz": 1100.0, "event_s": (10.0, 25.0),
              "gain": (0.3, 0.6), "age": (1, 15), "bmi": (14, 35)},
}
LEAD_S = 30
TAIL_S = 30
MIN_GAP_S = 10
RECOVERY_S = 5
HARMONICS = {1: 1.0, 2: 0.5}  # multiple of the snore centre -> relative amplitude
SNORE_RMS = 3000.0


@dataclass
class SynthConfig:
    seed: int = 0
    duration_h: float = 1.0
    target_ahi: float = 8.0
    event_duration_s: tuple[float, float] | None = None  # None: cohort default
    delay_mean_s: float = 26.0
    delay_sd_s: float = 6.0
    delay_max_s: float = 50.0
    baseline_pct: int = 96
    desat_depth_pct: tuple[float, float] = (4.0, 8.0)
    snore_snr_db: float = 10.0
    cohort: str = "adult"
    hypopnoea_fraction: float = 0.3
    breath_rate: float | None = None
    snore_hz: float | None = None

    def __post_init__(self):
        if self.target_ahi < 0:
            raise SynthError("target_ahi must be non-negative")
        if self.duration_h <= 0:
            raise SynthError("duration_h must be positive")
        if self.cohort not in COHORTS:
            raise SynthError(f"cohort must be one of {sorted(COHORTS)}")

    @property
    def duration_s(self) -> int:
        return int(round(self.duration_h * 3600))

    @property
    def event_range_s(self) -> tuple[float, float]:
        return tuple(self.event_duration_s or COHORTS[self.cohort]["event_s"])


@dataclass
class GroundTruth:
    events: list[EventAnnotation]
    delay_s: list[float]
    planted_ahi: float
    duration_h: float

    def to_json(self) -> dict:
        return {"events": [{"kind": e.kind.value, "start_s": e.start_s, "end_s": e.end_s}
                           for e in self.events],
                "delay_s": self.delay_s, "planted_ahi": self.planted_ahi,
                "duration_h": self.duration_h}


@dataclass
class SynthNight:
    audio: dsp.AudioNight
    spo2: Spo2Trace
    truth: GroundTruth
    config: SynthConfig
    meta: dict = field(default_factory=dict)


def _schedule(cfg: SynthConfig, rng: np.random.Generator):
    n = int(round(cfg.target_ahi * cfg.duration_h))
    lo, hi = cfg.event_range_s
    durations = rng.integers(int(lo), int(hi) + 1, size=n)
    delays = np.clip(np.rint(rng.normal(cfg.delay_mean_s, cfg.delay_sd_s, size=n)), 0, cfg.delay_max_s)
    # each event reserves room for itself and its SpO2 dip + recovery
    occupancy = np.maximum(durations + MIN_GAP_S, delays + durations + RECOVERY_S + 1).astype(int)
    free = cfg.duration_s - LEAD_S - TAIL_S - int(occupancy.sum())
    if free < 0:
        raise SynthError(f"cannot fit {n} events into {cfg.duration_h:g} h")
    gaps = np.floor(free * rng.dirichlet(np.ones(n + 1))).astype(int) if n else np.zeros(1, int)
    onsets = LEAD_S + np.cumsum(gaps[:n]) + np.concatenate([[0], np.cumsum(occupancy[:-1])]).astype(int)
    hypo = rng.random(n) < cfg.hypopnoea_fraction
    kinds = [EventKind.HYPOPNOEA if h else EventKind.APNOEA for h in hypo]
    events = [EventAnnotation(k, float(o), float(o + d))
              for k, o, d in zip(kinds, onsets, durations)]
    return events, [float(d) for d in delays]


def _band_filters(centre: float):
    """Band-pass sections for the snore fundamental and its second harmonic,
    each scaled to unit output variance for unit-variance white input."""
    out = []
    for mult, amp in HARMONICS.items():
        f = mult * centre
        sos = butter(2, [0.8 * f, 1.25 * f], btype="bandpass", fs=dsp.SAMPLE_RATE, output="sos")
        impulse = np.zeros(dsp.SAMPLE_RATE)
        impulse[0] = 1.0
        energy = np.sum(sosfilt(sos, impulse) ** 2)
        out.append((sos, amp / np.sqrt(energy)))
    return out


def _snore_audio(cfg: SynthConfig, events, rate: float, centre: float,
                 rng: np.random.Generator, chunk_s: int = 60) -> np.ndarray:
    n = cfg.duration_s * dsp.SAMPLE_RATE
    filters = _band_filters(centre)
    states = [np.zeros((sos.shape[0], 2)) for sos, _ in filters]
    harmonic_norm = np.sqrt(sum(a ** 2 for a in HARMONICS.values()))
    # sin^4 over a full cycle averages 3/8; only the positive half counts
    env_rms = np.sqrt(3 / 16)
    noise_rms = SNORE_RMS / 10 ** (cfg.snore_snr_db / 20)
    phase = rng.uniform(0, 2 * np.pi)
    apnoea_gain, hypopnoea_gain = COHORTS[cfg.cohort]["gain"]
    gain_marks = [(int(e.start_s * dsp.SAMPLE_RATE), int(e.end_s * dsp.SAMPLE_RATE),
                   apnoea_gain if e.kind is EventKind.APNOEA else hypopnoea_gain) for e in events]
    out = np.empty(n, dtype=np.int16)
    step = chunk_s * dsp.SAMPLE_RATE
    for lo in range(0, n, step):
        hi = min(n, lo + step)
        t = np.arange(lo, hi) / dsp.SAMPLE_RATE
        env = np.maximum(0.0, np.sin(2 * np.pi * rate / 60.0 * t + phase)) ** 2
        white = rng.standard_normal(hi - lo)
        band = np.zeros(hi - lo)
        for k, (sos, scale) in enumerate(filters):
            y, states[k] = sosfilt(sos, white, zi=states[k])
            band += scale * y
        gain = np.ones(hi - lo)
        for a, b, g in gain_marks:
            if a < hi and b > lo:
                gain[max(a, lo) - lo:min(b, hi) - lo] = g
        snore = band / harmonic_norm * env * gain * (SNORE_RMS / env_rms)
        x = snore + noise_rms * rng.standard_normal(hi - lo)
        out[lo:hi] = np.clip(np.rint(x), -32768, 32767)
    return out


def _streams(cfg: SynthConfig):
    # independent schedule / SpO2 / audio streams, so the physiology can be
    # generated without the audio and still match the full night
    return [np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(3)]


def synthesize_physiology(cfg: SynthConfig) -> tuple[Spo2Trace, GroundTruth]:
    """Events and SpO2 only; identical to the corresponding parts of synthesize_night."""
    sched_rng, spo2_rng, _ = _streams(cfg)
    events, delays = _schedule(cfg, sched_rng)
    spo2 = _spo2(cfg, events, delays, spo2_rng)
    return spo2, GroundTruth(events, delays, len(events) / cfg.duration_h, cfg.duration_h)


def synthesize_night(cfg: SynthConfig) -> SynthNight:
    spo2, truth = synthesize_physiology(cfg)
    profile = COHORTS[cfg.cohort]
    rate = cfg.breath_rate or profile["breath_rate"]
    centre = cfg.snore_hz or profile["snore_hz"]
    samples = _snore_audio(cfg, truth.events, rate, centre, _streams(cfg)[2])
    return SynthNight(dsp.AudioNight(samples), spo2, truth, cfg,
                      {"breath_rate": rate, "snore_hz": centre})


def _spo2(cfg: SynthConfig, events, delays, rng) -> Spo2Trace:
    n = cfg.duration_s
    # integer jitter of -1/0/+1 keeps the mode at baseline and never crosses the 3% threshold
    v = cfg.baseline_pct + rng.choice([-1.0, 0.0, 1.0], size=n, p=[0.2, 0.6, 0.2])
    lo, hi = cfg.desat_depth_pct
    for e, d in zip(events, delays):
        depth = float(np.rint(rng.uniform(lo, hi)))
        start = int(e.start_s + d)
        dur = int(e.end_s - e.start_s)
        v[start:start + dur] = cfg.baseline_pct - depth + rng.choice([-1.0, 0.0], size=len(v[start:start + dur]))
        ramp = np.rint(cfg.baseline_pct - depth * (1 - np.arange(1, RECOVERY_S + 1) / (RECOVERY_S + 1)))
        v[start + dur:start + dur + RECOVERY_S] = ramp[:len(v[start + dur:start + dur + RECOVERY_S])]
    return Spo2Trace(np.clip(v, 0, 100), rate_hz=1.0)


def night_data(cfg: SynthConfig, night_id: str, patient_id: str | None = None) -> NightData:
    """Synthesize a night straight into memory, skipping the file round trip."""
    night = synthesize_night(cfg)
    record = NightRecord(patient_id or night_id, night_id, None, None, None,
                         night.truth.events, cfg.duration_h,
                         extra={"cohort": cfg.cohort, "planted_ahi": night.truth.planted_ahi})
    return prepare_night(record, night.audio, night.spo2)


def synth_cohort_data(n_nights: int, template: SynthConfig, seed: int,
                      prefix: str | None = None) -> list[NightData]:
    prefix = prefix or template.cohort
    return [night_data(jitter_config(template, seed, i), f"{prefix}{i:03d}")
            for i in range(n_nights)]


def generate_night(cfg: SynthConfig, out_dir: str | Path, night_id: str,
                   patient_id: str | None = None) -> tuple[dict, GroundTruth]:
    """Write one night's WAV / SpO2 CSV / events CSV; return its manifest entry."""
    out_dir = Path(out_dir)
    (out_dir / "nights").mkdir(parents=True, exist_ok=True)
    night = synthesize_night(cfg)
    rel = {"wav": f"nights/{night_id}.wav", "spo2_csv": f"nights/{night_id}_spo2.csv",
           "events_csv": f"nights/{night_id}_events.csv"}
    write_wav(out_dir / rel["wav"], night.audio.samples)
    write_spo2_csv(out_dir / rel["spo2_csv"], night.spo2)
    write_events_csv(out_dir / rel["events_csv"], night.truth.events)
    rng = np.random.default_rng([cfg.seed, 1])
    prof = COHORTS[cfg.cohort]
    snr = compute_snr(night.audio)
    entry = {
        "patient_id": patient_id or night_id,
        "night_id": night_id,
        **rel,
        "sleep_time_h": cfg.duration_h,
        "sex": str(rng.choice(["F", "M"])),
        "age_y": int(rng.integers(prof["age"][0], prof["age"][1] + 1)),
        "bmi": round(float(rng.uniform(*prof["bmi"])), 1),
        "snr_db": None if snr is None else round(snr, 2),
        "cohort": cfg.cohort,
        "planted_ahi": night.truth.planted_ahi,
    }
    return entry, night.truth


def jitter_config(template: SynthConfig, seed: int, index: int) -> SynthConfig:
    """Per-night variation around a cohort template, derived from (seed, index)."""
    rng = np.random.default_rng([seed, index, 7])
    prof = COHORTS[template.cohort]
    return replace(
        template,
        seed=int(rng.integers(2 ** 31)),
        target_ahi=template.target_ahi * float(rng.uniform(0.25, 1.75)),
        delay_mean_s=template.delay_mean_s + float(rng.normal(0, 3)),
        baseline_pct=int(template.baseline_pct + rng.integers(-2, 3)),
        snore_snr_db=template.snore_snr_db + float(rng.uniform(-3, 3)),
        breath_rate=(template.breath_rate or prof["breath_rate"]) * float(rng.uniform(0.9, 1.1)),
        snore_hz=(template.snore_hz or prof["snore_hz"]) * float(rng.uniform(0.9, 1.1)),
    )


def generate_cohort(n_nights: int, template: SynthConfig, seed: int, out_dir: str | Path,
                    prefix: str | None = None) -> Path:
    """Generate ``n_nights`` jittered nights plus ``manifest.json`` and ``truth.json``."""
    if n_nights < 1:
        raise SynthError("need at least one night")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prefix = prefix or template.cohort
    entries, truths = [], {}
    for i in range(n_nights):
        cfg = jitter_config(template, seed, i)
        night_id = f"{prefix}{i:03d}"
        entry, truth = generate_night(cfg, out_dir, night_id)
        entries.append(entry)
        truths[night_id] = {**truth.to_json(), "config": _jsonable(asdict(cfg))}
    write_manifest(out_dir / "manifest.json", entries)
    (out_dir / "truth.json").write_text(json.dumps(truths, indent=1, sort_keys=True) + "\n")
    return out_dir / "manifest.json"


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def spectral_centroid(samples: np.ndarray, sample_rate: int = dsp.SAMPLE_RATE) -> float:
    x = np.asarray(samples, dtype=np.float64)
    n = min(len(x), 1 << 20)
    power = np.abs(np.fft.rfft(x[:n])) ** 2
    f = np.fft.rfftfreq(n, 1.0 / sample_rate)
    return float((f * power).sum() / power.sum())
