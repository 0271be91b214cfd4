import math
import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jointser.audio import (
    AudioBuffer,
    EmptyAudioError,
    InvalidSpeedError,
    MelConfig,
    MixSpec,
    NotMonoError,
    SampleRateMismatchError,
    TooShortError,
    UnsupportedEncodingError,
    ZeroEnergyError,
    _resample_linear,
    load_wav,
    log_mel,
    measured_snr_db,
    mix_at_snr,
    mix_components,
    mix_gain,
    rms,
    save_wav,
    speed_perturb,
)


def write_raw_wav(path, frames: bytes, channels=1, width=2, rate=16000):
    with wave.open(str(path), "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(width)
        w.setframerate(rate)
        w.writeframes(frames)


class TestWavIO:
    def test_scaling(self, tmp_path):
        path = tmp_path / "x.wav"
        write_raw_wav(path, np.array([0, 16384, -32768], dtype="<i2").tobytes())
        buf = load_wav(path)
        assert buf.samples.tolist() == [0.0, 0.5, -1.0]
        assert buf.sample_rate_hz == 16000

    def test_empty_data_chunk(self, tmp_path):
        path = tmp_path / "empty.wav"
        write_raw_wav(path, b"")
        with pytest.raises(EmptyAudioError, match="empty audio"):
            load_wav(path)

    def test_distinct_errors(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_wav(tmp_path / "missing.wav")
        stereo = tmp_path / "stereo.wav"
        write_raw_wav(stereo, np.zeros(8, dtype="<i2").tobytes(), channels=2)
        with pytest.raises(NotMonoError):
            load_wav(stereo)
        eight_bit = tmp_path / "u8.wav"
        write_raw_wav(eight_bit, bytes(8), width=1)
        with pytest.raises(UnsupportedEncodingError):
            load_wav(eight_bit)
        junk = tmp_path / "junk.wav"
        junk.write_bytes(b"not a riff file at all")
        with pytest.raises(UnsupportedEncodingError):
            load_wav(junk)

    def test_round_trip_within_one_lsb(self, tmp_path):
        rng = np.random.default_rng(0)
        buf = AudioBuffer(rng.uniform(-1, 1, 5000), 16000)
        back = load_wav(save_wav(tmp_path / "r.wav", buf))
        assert back.sample_rate_hz == 16000
        assert np.max(np.abs(back.samples - buf.samples)) <= 1 / 32768


class TestRms:
    def test_examples(self):
        assert rms(AudioBuffer(np.full(37, 0.5))) == 0.5
        assert rms(AudioBuffer(np.zeros(10))) == 0.0
        assert rms(AudioBuffer([1.0, -1.0, 1.0, -1.0])) == 1.0

    def test_empty(self):
        with pytest.raises(EmptyAudioError):
            rms(AudioBuffer(np.zeros(0)))

    @given(st.just(0.0) | st.floats(1e-6, 10).flatmap(lambda m: st.sampled_from([m, -m])), st.integers(0, 2**31))
    def test_homogeneous(self, a, seed):
        x = np.random.default_rng(seed).standard_normal(64)
        assert math.isclose(rms(AudioBuffer(a * x)), abs(a) * rms(AudioBuffer(x)), rel_tol=1e-12, abs_tol=1e-300)


def _spec(snr, offset=0):
    return MixSpec(snr, "noise", "n1", offset, seed=1)


class TestMix:
    def test_gain_examples(self):
        assert mix_gain(0.3, 0.3, 0.0) == 1.0
        assert math.isclose(mix_gain(0.1, 0.2, 20.0), 0.05, rel_tol=1e-12)

    def test_length_and_tiling(self):
        clean = AudioBuffer(np.sin(np.arange(1000) * 0.1) * 0.3)
        noise = AudioBuffer(np.array([0.1, -0.2, 0.3]))
        speech, scaled = mix_components(clean, noise, _spec(10, offset=2))
        assert len(scaled) == 1000
        pattern = scaled[:6] / scaled[0]
        np.testing.assert_allclose(pattern, [1, 1 / 3, -2 / 3, 1, 1 / 3, -2 / 3])

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(-10, 50), st.integers(100, 3000), st.integers(50, 4000))
    def test_component_snr_exact(self, seed, snr, n_clean, n_noise):
        rng = np.random.default_rng(seed)
        clean = AudioBuffer(rng.uniform(-1, 1, n_clean) * rng.uniform(0.01, 1))
        noise = AudioBuffer(rng.standard_normal(n_noise) * rng.uniform(0.01, 2))
        spec = _spec(snr, offset=int(rng.integers(n_noise)))
        speech, scaled = mix_components(clean, noise, spec)
        assert abs(measured_snr_db(speech, scaled) - snr) < 1e-4
        mixed = mix_at_snr(clean, noise, spec)
        assert len(mixed) == n_clean
        assert np.max(np.abs(mixed.samples)) <= 1.0 + 1e-12

    def test_clipping_rescales_jointly(self):
        clean = AudioBuffer(np.full(100, 0.9) * np.sign(np.sin(np.arange(100))))
        noise = AudioBuffer(np.ones(100))
        speech, scaled = mix_components(clean, noise, _spec(0.0))
        assert np.max(np.abs(speech + scaled)) == pytest.approx(1.0)
        assert measured_snr_db(speech, scaled) == pytest.approx(0.0, abs=1e-9)

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        clean, noise = AudioBuffer(rng.uniform(-0.5, 0.5, 800)), AudioBuffer(rng.uniform(-0.5, 0.5, 300))
        a = mix_at_snr(clean, noise, _spec(7.0, 12))
        b = mix_at_snr(clean, noise, _spec(7.0, 12))
        assert a.samples.tobytes() == b.samples.tobytes()

    def test_errors(self):
        ok = AudioBuffer(np.ones(10) * 0.1)
        with pytest.raises(ZeroEnergyError):
            mix_at_snr(AudioBuffer(np.zeros(10)), ok, _spec(5))
        with pytest.raises(ZeroEnergyError):
            mix_at_snr(ok, AudioBuffer(np.zeros(10)), _spec(5))
        with pytest.raises(SampleRateMismatchError):
            mix_at_snr(ok, AudioBuffer(np.ones(10), 8000), _spec(5))
        with pytest.raises(ValueError):
            MixSpec(float("nan"), "noise", "x")
        with pytest.raises(ValueError):
            MixSpec(5.0, "traffic", "x")


def zero_crossing_hz(x, sr):
    crossings = np.count_nonzero(np.signbit(x[1:]) != np.signbit(x[:-1]))
    return crossings / 2 / (len(x) / sr)


class TestSpeed:
    def test_identity(self):
        x = AudioBuffer(np.random.default_rng(0).uniform(-1, 1, 16000))
        y = speed_perturb(x, 100)
        assert y == x and y.samples is not x.samples

    def test_length(self):
        x = AudioBuffer(np.zeros(16000))
        assert abs(len(speed_perturb(x, 95)) - 16842) <= 1
        assert abs(len(speed_perturb(x, 105)) - round(16000 / 1.05)) <= 1

    def test_frequency_shift(self):
        sr = 16000
        t = np.arange(2 * sr) / sr
        x = AudioBuffer(0.5 * np.sin(2 * np.pi * 100 * t + 0.1), sr)
        assert abs(zero_crossing_hz(x.samples, sr) - 100) <= 1
        assert abs(zero_crossing_hz(speed_perturb(x, 105).samples, sr) - 105) <= 1

    def test_inverse_restores_length(self):
        for n in (999, 16000, 12345):
            y = speed_perturb(AudioBuffer(np.ones(n)), 95)
            assert abs(len(_resample_linear(y.samples, 100 / 95)) - n) <= 2

    def test_invalid(self):
        with pytest.raises(InvalidSpeedError):
            speed_perturb(AudioBuffer(np.ones(10)), 110)


class TestLogMel:
    def test_frame_count(self):
        feats = log_mel(AudioBuffer(np.random.default_rng(0).uniform(-1, 1, 16000)), MelConfig())
        assert feats.shape == ((16000 - 400) // 160 + 1, 80) == (98, 80)

    def test_silence_floor(self):
        cfg = MelConfig(log_floor=1e-10)
        feats = log_mel(AudioBuffer(np.zeros(4000)), cfg)
        assert np.all(feats == np.log(1e-10))

    def test_amplitude_doubling(self):
        x = np.random.default_rng(1).uniform(-0.4, 0.4, 8000)
        cfg = MelConfig()
        a, b = log_mel(AudioBuffer(x), cfg), log_mel(AudioBuffer(2 * x), cfg)
        above = a > np.log(cfg.log_floor)
        np.testing.assert_allclose((b - a)[above], np.log(4.0), atol=1e-9)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(1e-8, 1.0))
    def test_finite(self, seed, scale):
        x = np.random.default_rng(seed).standard_normal(2000) * scale
        assert np.all(np.isfinite(log_mel(AudioBuffer(x))))

    def test_too_short(self):
        with pytest.raises(TooShortError):
            log_mel(AudioBuffer(np.ones(399)))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            MelConfig(hop_ms=30, win_ms=25)
        with pytest.raises(ValueError):
            MelConfig(fmin_hz=9000)
