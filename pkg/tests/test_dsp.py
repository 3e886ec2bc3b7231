import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from osa_transfer import dsp
from osa_transfer.errors import DspError

SR = dsp.SAMPLE_RATE


def tone(freq, seconds, amp=8000.0):
    t = np.arange(int(seconds * SR)) / SR
    return np.rint(amp * np.sin(2 * np.pi * freq * t)).astype(np.int16)


class TestSegmentation:
    def test_120s_night(self):
        wins = dsp.segment_audio(dsp.AudioNight(np.zeros(120 * SR, np.int16)))
        assert len(wins) == 10
        assert [w.start_s for w in wins] == [0, 10, 20, 30, 40, 50, 60, 70, 80, 90]

    def test_single_window(self):
        wins = dsp.segment_audio(dsp.AudioNight(np.zeros(30 * SR, np.int16)))
        assert [(w.index, w.start_s, w.end_s) for w in wins] == [(0, 0, 30)]

    def test_eight_hour_night(self):
        # zero pages are never touched, so this does not allocate 900 MB
        night = dsp.AudioNight(np.zeros(28800 * SR, np.int16))
        assert len(dsp.segment_audio(night)) == (28800 - 30) // 10 + 1 == 2878

    def test_trailing_partial_window_dropped(self):
        wins = dsp.segment_audio(dsp.AudioNight(np.zeros(129 * SR, np.int16)))
        assert wins[-1].end_s == 120

    def test_too_short(self):
        with pytest.raises(DspError, match="night too short"):
            dsp.segment_audio(dsp.AudioNight(np.zeros(29 * SR, np.int16)))

    def test_rejects_other_rates(self):
        with pytest.raises(DspError, match="unsupported sample rate"):
            dsp.AudioNight(np.zeros(100, np.int16), sample_rate=8000)

    def test_rejects_out_of_range(self):
        with pytest.raises(DspError):
            dsp.AudioNight(np.array([0, 40000]))


class TestStft:
    def test_frame_count(self):
        spec = dsp.stft_power(np.zeros(30 * SR, np.int16))
        assert spec.frame_count == 1 + (480000 - 800) // 320 == 1498
        assert spec.bin_count == 513

    def test_zero_input(self):
        assert not dsp.stft_power(np.zeros(30 * SR, np.int16)).values.any()

    def test_length_mismatch(self):
        with pytest.raises(DspError, match="segment length mismatch"):
            dsp.stft_power(np.zeros(30 * SR - 1, np.int16))

    def test_matches_brute_force_dft(self):
        x = tone(1000, 30)
        spec = dsp.stft_power(x)
        frame = x[320 * 7:320 * 7 + 800] / 32768.0
        w = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(800) / 800)
        k = np.arange(513)[:, None]
        dft = (frame * w * np.exp(-2j * np.pi * k * np.arange(800) / 1024)).sum(axis=1)
        np.testing.assert_allclose(spec.values[7], np.abs(dft) ** 2, rtol=1e-9, atol=1e-12)

    def test_tone_energy_concentrated(self):
        spec = dsp.stft_power(tone(1000, 30)).values
        nearest = int(round(1000 / (SR / dsp.N_FFT)))
        assert np.all(spec.argmax(axis=1) == nearest)
        # Hann main lobe of an 800-sample window spans +-2.6 bins of the 1024-point grid
        lobe = spec[:, nearest - 3:nearest + 4].sum(axis=1) / spec.sum(axis=1)
        assert lobe.min() > 0.9

    @given(st.integers(800, 20000))
    @settings(max_examples=40, deadline=None)
    def test_frame_count_formula(self, n):
        x = np.zeros(n, np.int16)
        assert dsp._power_frames(x).shape[0] == dsp.frame_count(n) == 1 + (n - 800) // 320

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_power_non_negative(self, seed):
        x = np.random.default_rng(seed).integers(-32768, 32767, 4000).astype(np.int16)
        assert (dsp._power_frames(x) >= 0).all()


class TestFilterbank:
    bank = dsp.mel_filterbank()

    def test_shape_and_sign(self):
        assert self.bank.shape == (64, 513)
        assert (self.bank >= 0).all()
        # peak-normalised triangles sampled on the FFT grid
        assert (self.bank.max(axis=1) <= 1.0).all() and (self.bank.max(axis=1) > 0.5).all()

    def test_centres_monotone(self):
        peaks = self.bank.argmax(axis=1)
        assert peaks[0] < peaks[63]
        centres = dsp.mel_center_frequencies()
        assert np.all(np.diff(centres) > 0)
        assert centres[0] > 0 and centres[-1] < 8000

    def test_htk_scale(self):
        assert dsp.hz_to_mel(700) == pytest.approx(2595 * np.log10(2))
        np.testing.assert_allclose(dsp.mel_to_hz(dsp.hz_to_mel([0, 440, 8000])), [0, 440, 8000])
        mels = dsp.hz_to_mel(dsp.mel_edge_frequencies())
        np.testing.assert_allclose(np.diff(mels), np.diff(mels)[0])

    def test_coverage(self):
        freqs = np.arange(513) * SR / 1024
        centres = dsp.mel_center_frequencies()
        inside = (freqs >= centres[0]) & (freqs <= centres[-1])
        assert (self.bank[:, inside] > 0).any(axis=0).all()

    def test_adjacent_overlap(self):
        both = (self.bank[:-1] > 0) & (self.bank[1:] > 0)
        assert both[8:].any(axis=1).all()

    def test_flat_spectrum(self):
        flat = np.ones(513)
        brute = np.array([sum(self.bank[i, k] * flat[k] for k in range(513)) for i in range(64)])
        np.testing.assert_allclose(self.bank @ flat, brute)
        area = self.bank / self.bank.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(area @ flat, np.ones(64))


class TestLogMel:
    def test_zero_floor(self):
        out = dsp.log_mel(dsp.PowerSpectrogram(np.zeros((5, 513))), dsp.mel_filterbank())
        np.testing.assert_array_equal(out.values, np.log(1e-10))
        assert out.values.shape == (5, 64)

    def test_doubling_shifts_by_log2(self):
        p = np.random.default_rng(0).uniform(1, 10, (4, 513))
        bank = dsp.mel_filterbank()
        a = dsp.log_mel(dsp.PowerSpectrogram(p), bank).values
        b = dsp.log_mel(dsp.PowerSpectrogram(2 * p), bank).values
        np.testing.assert_allclose(b - a, np.log(2), atol=1e-9)

    def test_toy(self):
        spec = np.array([[1.0, 2.0, 3.0], [0.5, 0.0, 4.0]])
        bank = np.array([[1.0, 0.5, 0.0], [0.0, 0.5, 1.0]])
        expected = np.log(np.array([[2.0, 4.0], [0.5, 4.0]]) + 1e-10)
        np.testing.assert_allclose(dsp.log_mel(dsp.PowerSpectrogram(spec), bank).values, expected)

    def test_dimension_mismatch(self):
        with pytest.raises(DspError, match="dimension mismatch"):
            dsp.log_mel(dsp.PowerSpectrogram(np.zeros((2, 401))), dsp.mel_filterbank())

    @given(st.floats(100, 7000))
    @settings(max_examples=25, deadline=None)
    def test_tone_localisation(self, freq):
        power = dsp._power_frames(tone(freq, 0.2))
        m = dsp.log_mel(dsp.PowerSpectrogram(power), dsp.mel_filterbank()).values
        band = int(np.bincount(m.argmax(axis=1)).argmax())
        edges = dsp.mel_edge_frequencies()
        spacing = edges[band + 2] - edges[band + 1]
        assert abs(edges[band + 1] - freq) <= spacing


class TestNormalise:
    def test_constant_night(self):
        segs = [dsp.MelSegment(np.full((3, 64), -4.0)) for _ in range(2)]
        out, stats = dsp.normalize_per_bin(segs)
        assert all(not s.values.any() for s in out)
        np.testing.assert_array_equal(stats.std, 0.0)

    def test_zero_mean(self):
        rng = np.random.default_rng(1)
        segs = [dsp.MelSegment(rng.normal(3, 2, (50, 64))) for _ in range(4)]
        out, _ = dsp.normalize_per_bin(segs)
        flat = np.concatenate([s.values for s in out])
        assert np.abs(flat.mean(axis=0)).max() <= 1e-6
        np.testing.assert_allclose(flat.std(axis=0), 1.0, atol=1e-6)

    def test_toy_zscores(self):
        a = np.array([[1.0, 10.0], [3.0, 10.0]])
        b = np.array([[5.0, 10.0], [7.0, 14.0]])
        out, stats = dsp.normalize_per_bin([dsp.MelSegment(a), dsp.MelSegment(b)])
        # bin 0: values 1,3,5,7 -> mean 4, std sqrt(5); bin 1: 10,10,10,14 -> mean 11, std sqrt(3)
        np.testing.assert_allclose(stats.mean, [4, 11])
        np.testing.assert_allclose(stats.std, [np.sqrt(5), np.sqrt(3)])
        np.testing.assert_allclose(out[0].values[:, 0], [-3 / np.sqrt(5), -1 / np.sqrt(5)])
        np.testing.assert_allclose(out[1].values[:, 1], [-1 / np.sqrt(3), 3 / np.sqrt(3)])

    def test_round_trip(self):
        rng = np.random.default_rng(2)
        raw = [rng.normal(-5, 3, (20, 64)) for _ in range(3)]
        out, stats = dsp.normalize_per_bin([dsp.MelSegment(r) for r in raw])
        for r, o in zip(raw, out):
            np.testing.assert_allclose(stats.invert(o.values), r, rtol=1e-9)

    def test_empty(self):
        with pytest.raises(DspError):
            dsp.normalize_per_bin([])


@pytest.fixture(scope="module")
def noisy():
    rng = np.random.default_rng(3)
    x = rng.normal(0, 2000, 120 * SR) * (1 + np.sin(np.arange(120 * SR) / SR))
    return dsp.AudioNight(np.clip(x, -32768, 32767).astype(np.int16))


class TestExtractFeatures:
    def test_shapes(self, noisy):
        f = dsp.extract_features(noisy)
        assert len(f) == 10
        assert f.values.shape == (10, 1498, 64)
        w, seg = f[3]
        assert w.start_s == 30 and seg.normalised

    def test_deterministic(self, noisy):
        a = dsp.extract_features(noisy)
        b = dsp.extract_features(noisy)
        assert np.ascontiguousarray(a.values).tobytes() == np.ascontiguousarray(b.values).tobytes()

    def test_silence(self):
        f = dsp.extract_features(dsp.AudioNight(np.zeros(120 * SR, np.int16)))
        assert not np.asarray(f.values).any()

    def test_matches_per_segment_composition(self, noisy):
        f = dsp.extract_features(noisy, dtype=np.float64)
        bank = dsp.mel_filterbank()
        segs = [dsp.log_mel(dsp.stft_power(noisy.samples[int(w.start_s) * SR:int(w.start_s) * SR + 480000]), bank)
                for w in f.windows]
        ref, stats = dsp.normalize_per_bin(segs)
        np.testing.assert_allclose(f.stats.mean, stats.mean, rtol=1e-10)
        np.testing.assert_allclose(f.stats.std, stats.std, rtol=1e-8)
        for i in (0, 4, 9):
            np.testing.assert_allclose(f.values[i], ref[i].values, atol=1e-8)

    def test_night_level_normalisation(self, noisy):
        f = dsp.extract_features(noisy, dtype=np.float64)
        flat = np.asarray(f.values).reshape(-1, 64)
        assert np.abs(flat.mean(axis=0)).max() <= 1e-6

    def test_cache_round_trip(self, noisy, tmp_path):
        f = dsp.extract_features(noisy)
        path = tmp_path / "n.feat"
        dsp.write_feature_cache(path, f)
        stats, values = dsp.read_feature_cache(path)
        np.testing.assert_array_equal(values, f.values)
        np.testing.assert_allclose(stats.mean, f.stats.mean, rtol=1e-6)
        raw = path.read_bytes()
        assert raw[:4] == b"OSAF"
        assert len(raw) == 20 + 2 * 64 * 4 + 10 * 1498 * 64 * 4
