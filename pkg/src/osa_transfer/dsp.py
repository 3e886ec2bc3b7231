"""Log-Mel feature extraction for overnight audio.

A night is cut into 30 s windows with a 10 s shift. Each window is turned into
a Hann-windowed power spectrogram (50 ms window, 20 ms hop), projected onto a
64-band Mel filterbank, log-compressed and z-scored per Mel bin using
statistics gathered over the whole night.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided, sliding_window_view
from scipy.signal import get_window

from .errors import DspError

SAMPLE_RATE = 16000
SEGMENT_S = 30
SHIFT_S = 10
WINDOW_SAMPLES = 800  # 50 ms
HOP_SAMPLES = 320  # 20 ms
N_FFT = 1024
N_BINS = N_FFT // 2 + 1
N_MELS = 64
LOG_EPS = 1e-10
STD_FLOOR = 1e-6

SEGMENT_SAMPLES = SEGMENT_S * SAMPLE_RATE
SHIFT_SAMPLES = SHIFT_S * SAMPLE_RATE
# 10 s shift is an exact multiple of the hop, so segments share STFT frames.
SHIFT_FRAMES = SHIFT_SAMPLES // HOP_SAMPLES

FEATURE_MANIFEST = {
    "sample_rate": SAMPLE_RATE,
    "segment_s": SEGMENT_S,
    "shift_s": SHIFT_S,
    "window": "hann(periodic)",
    "window_samples": WINDOW_SAMPLES,
    "hop_samples": HOP_SAMPLES,
    "n_fft": N_FFT,
    "n_mels": N_MELS,
    "mel_scale": "htk",
    "filter_norm": "peak",
    "log_eps": LOG_EPS,
    "normalisation": "per-night per-bin z-score",
}


def frame_count(n_samples: int) -> int:
    return 1 + (n_samples - WINDOW_SAMPLES) // HOP_SAMPLES


@dataclass(frozen=True)
class AudioNight:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate != SAMPLE_RATE:
            raise DspError(f"unsupported sample rate {self.sample_rate} Hz (need {SAMPLE_RATE})")
        x = np.asarray(self.samples)
        if x.ndim != 1:
            raise DspError("audio must be mono")
        if x.dtype != np.int16:
            if not np.issubdtype(x.dtype, np.integer):
                raise DspError("audio samples must be 16-bit integers")
            if x.size and (x.min() < -32768 or x.max() > 32767):
                raise DspError("audio samples outside the 16-bit range")
            x = x.astype(np.int16)
        object.__setattr__(self, "samples", x)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class SegmentWindow:
    index: int
    start_s: float
    length_s: float = SEGMENT_S
    shift_s: float = SHIFT_S

    @property
    def end_s(self) -> float:
        return self.start_s + self.length_s

    @property
    def center_s(self) -> float:
        return self.start_s + self.length_s / 2


@dataclass
class PowerSpectrogram:
    values: np.ndarray  # (T, K)
    window_ms: float = 50.0
    hop_ms: float = 20.0

    @property
    def frame_count(self) -> int:
        return self.values.shape[0]

    @property
    def bin_count(self) -> int:
        return self.values.shape[1]


@dataclass
class MelSegment:
    values: np.ndarray  # (T, F)
    normalised: bool = False


@dataclass
class BinStats:
    """Per-Mel-bin mean and standard deviation for one night."""

    mean: np.ndarray
    std: np.ndarray

    @property
    def scale(self) -> np.ndarray:
        return np.maximum(self.std, STD_FLOOR)

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.scale

    def invert(self, values: np.ndarray) -> np.ndarray:
        return values * self.scale + self.mean


def segment_audio(night: AudioNight) -> list[SegmentWindow]:
    n = len(night.samples)
    if n < SEGMENT_SAMPLES:
        raise DspError(f"night too short: {night.duration_s:.1f} s < {SEGMENT_S} s")
    count = (n - SEGMENT_SAMPLES) // SHIFT_SAMPLES + 1
    return [SegmentWindow(i, float(i * SHIFT_S)) for i in range(count)]


_HANN = get_window("hann", WINDOW_SAMPLES, fftbins=True)


def _power_frames(x: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Power spectra of every full 800-sample frame at a 320-sample hop."""
    x = np.asarray(x, dtype=np.float64) / 32768.0
    frames = sliding_window_view(x, WINDOW_SAMPLES)[::HOP_SAMPLES]
    out = np.empty((frames.shape[0], N_BINS))
    for lo in range(0, frames.shape[0], chunk):
        spec = np.fft.rfft(frames[lo:lo + chunk] * _HANN, n=N_FFT, axis=1)
        out[lo:lo + chunk] = spec.real ** 2 + spec.imag ** 2
    return out


def stft_power(window_samples: np.ndarray) -> PowerSpectrogram:
    if len(window_samples) != SEGMENT_SAMPLES:
        raise DspError(f"segment length mismatch: {len(window_samples)} != {SEGMENT_SAMPLES}")
    return PowerSpectrogram(_power_frames(window_samples))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_edge_frequencies(bin_count: int = N_MELS, sample_rate: int = SAMPLE_RATE,
                         fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """bin_count + 2 frequencies equally spaced in Mel; filter i peaks at edge i+1."""
    fmax = sample_rate / 2 if fmax is None else fmax
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), bin_count + 2))


def mel_center_frequencies(bin_count: int = N_MELS, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    return mel_edge_frequencies(bin_count, sample_rate)[1:-1]


def mel_filterbank(bin_count: int = N_MELS, sample_rate: int = SAMPLE_RATE,
                   fft_bins: int = N_BINS) -> np.ndarray:
    """Peak-normalised triangular filters on the HTK Mel scale, shape (bin_count, fft_bins)."""
    n_fft = 2 * (fft_bins - 1)
    freqs = np.arange(fft_bins) * sample_rate / n_fft
    edges = mel_edge_frequencies(bin_count, sample_rate)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def log_mel(spec: PowerSpectrogram, bank: np.ndarray) -> MelSegment:
    if bank.shape[1] != spec.bin_count:
        raise DspError(f"dimension mismatch: filterbank has {bank.shape[1]} bins, "
                       f"spectrogram has {spec.bin_count}")
    return MelSegment(np.log(spec.values @ bank.T + LOG_EPS))


def normalize_per_bin(segments: Sequence[MelSegment]) -> tuple[list[MelSegment], BinStats]:
    if len(segments) == 0:
        raise DspError("cannot normalise an empty night")
    stacked = np.stack([s.values for s in segments]).astype(np.float64)
    flat = stacked.reshape(-1, stacked.shape[-1])
    stats = BinStats(flat.mean(axis=0), flat.std(axis=0))
    return [MelSegment(stats.apply(v), normalised=True) for v in stacked], stats


@dataclass
class NightFeatures:
    """Normalised features for a night.

    ``values`` has shape (n_segments, T, F). It is a read-only strided view
    over the night-level frame matrix, since consecutive segments share 1000
    of their 1498 frames.
    """

    windows: list[SegmentWindow]
    values: np.ndarray
    stats: BinStats
    manifest: dict = field(default_factory=lambda: dict(FEATURE_MANIFEST))

    def __len__(self) -> int:
        return len(self.windows)

    def __getitem__(self, i: int) -> tuple[SegmentWindow, MelSegment]:
        return self.windows[i], MelSegment(self.values[i], normalised=True)

    def __iter__(self) -> Iterator[tuple[SegmentWindow, MelSegment]]:
        for i in range(len(self)):
            yield self[i]


def _segment_view(frames: np.ndarray, n_segments: int, t: int) -> np.ndarray:
    s0, s1 = frames.strides
    view = as_strided(frames, shape=(n_segments, t, frames.shape[1]),
                      strides=(SHIFT_FRAMES * s0, s0, s1), writeable=False)
    return view


def extract_features(night: AudioNight, dtype=np.float32) -> NightFeatures:
    windows = segment_audio(night)
    n = len(windows)
    t = frame_count(SEGMENT_SAMPLES)
    used = (n - 1) * SHIFT_FRAMES + t
    # only the samples that some window covers
    n_samples = (used - 1) * HOP_SAMPLES + WINDOW_SAMPLES
    power = _power_frames(night.samples[:n_samples])
    logmel = np.log(power @ mel_filterbank().T + LOG_EPS)
    del power

    # each frame counted once per segment that contains it
    cover = np.zeros(used + 1)
    starts = np.arange(n) * SHIFT_FRAMES
    np.add.at(cover, starts, 1.0)
    np.add.at(cover, starts + t, -1.0)
    weight = np.cumsum(cover)[:used]
    total = weight.sum()
    # offset by the first frame so a constant night yields an exact mean
    ref = logmel[0]
    mean = ref + weight @ (logmel - ref) / total
    var = weight @ (logmel - mean) ** 2 / total
    stats = BinStats(mean, np.sqrt(var))

    frames = np.ascontiguousarray(stats.apply(logmel), dtype=dtype)
    return NightFeatures(windows, _segment_view(frames, n, t), stats)


# Feature cache: little-endian
#   magic "OSAF", uint32 version, uint32 T, uint32 F, uint32 count,
#   float32[F] mean, float32[F] std, float32[count*T*F] segments (row-major)
_CACHE_MAGIC = b"OSAF"
_CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sIIII")


def write_feature_cache(path: str | Path, features: NightFeatures) -> None:
    count, t, f = features.values.shape
    with open(path, "wb") as fh:
        fh.write(_CACHE_HEADER.pack(_CACHE_MAGIC, _CACHE_VERSION, t, f, count))
        fh.write(features.stats.mean.astype("<f4").tobytes())
        fh.write(features.stats.std.astype("<f4").tobytes())
        for seg in features.values:
            fh.write(np.ascontiguousarray(seg, dtype="<f4").tobytes())


def read_feature_cache(path: str | Path) -> tuple[BinStats, np.ndarray]:
    with open(path, "rb") as fh:
        magic, version, t, f, count = _CACHE_HEADER.unpack(fh.read(_CACHE_HEADER.size))
        if magic != _CACHE_MAGIC or version != _CACHE_VERSION:
            raise DspError(f"{path}: not a feature cache (version {_CACHE_VERSION})")
        mean = np.frombuffer(fh.read(4 * f), dtype="<f4").astype(np.float64)
        std = np.frombuffer(fh.read(4 * f), dtype="<f4").astype(np.float64)
        data = np.frombuffer(fh.read(4 * count * t * f), dtype="<f4")
    if data.size != count * t * f:
        raise DspError(f"{path}: truncated feature cache")
    return BinStats(mean, std), data.reshape(count, t, f).astype(np.float32)
