"""Signal-level primitives: WAV I/O, RMS, SNR mixing, speed perturbation, log-mel."""

from __future__ import annotations

import json
import math
import wave
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
NOISE_CATEGORIES = ("noise", "music", "speech")
SPEED_FACTORS = (95, 100, 105)


class AudioError(Exception):
    """Base class for audio-level failures."""

    code = "audio_error"


class EmptyAudioError(AudioError):
    code = "empty_audio"

    def __init__(self, what="buffer"):
        super().__init__(f"empty audio: {what}")


class NotMonoError(AudioError):
    code = "not_mono"


class UnsupportedEncodingError(AudioError):
    code = "unsupported_encoding"


class SampleRateMismatchError(AudioError):
    code = "sample_rate_mismatch"


class ZeroEnergyError(AudioError):
    code = "zero_energy"


class InvalidSpeedError(AudioError):
    code = "invalid_speed"


class TooShortError(AudioError):
    code = "too_short"


@dataclass(frozen=True, eq=False)
class AudioBuffer:
    """Mono waveform with amplitudes nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise NotMonoError(f"expected 1-D samples, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise AudioError("non-finite samples")
        if int(self.sample_rate_hz) <= 0:
            raise AudioError(f"sample rate must be positive, got {self.sample_rate_hz}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    def __len__(self):
        return self.samples.shape[0]

    def __eq__(self, other):
        if not isinstance(other, AudioBuffer):
            return NotImplemented
        return self.sample_rate_hz == other.sample_rate_hz and np.array_equal(
            self.samples, other.samples
        )

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz


@dataclass(frozen=True)
class MixSpec:
    snr_db: float
    noise_category: str
    noise_clip_id: str
    noise_offset_samples: int = 0
    seed: int = 0

    def __post_init__(self):
        if not math.isfinite(self.snr_db):
            raise ValueError(f"snr_db must be finite, got {self.snr_db}")
        if self.noise_category not in NOISE_CATEGORIES:
            raise ValueError(f"unknown noise category {self.noise_category!r}")
        if self.noise_offset_samples < 0:
            raise ValueError("noise_offset_samples must be non-negative")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d) -> MixSpec:
        return cls(
            snr_db=float(d["snr_db"]),
            noise_category=d["noise_category"],
            noise_clip_id=d["noise_clip_id"],
            noise_offset_samples=int(d["noise_offset_samples"]),
            seed=int(d["seed"]),
        )


@dataclass(frozen=True)
class MelConfig:
    n_mels: int = 80
    win_ms: float = 25.0
    hop_ms: float = 10.0
    fmin_hz: float = 0.0
    fmax_hz: float = 8000.0
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if not (self.win_ms > 0 and self.hop_ms > 0):
            raise ValueError("win_ms and hop_ms must be positive")
        if self.hop_ms > self.win_ms:
            raise ValueError("hop_ms must not exceed win_ms")
        if not (0 <= self.fmin_hz < self.fmax_hz):
            raise ValueError("need 0 <= fmin_hz < fmax_hz")
        if not self.log_floor > 0:
            raise ValueError("log_floor must be positive")

    def win_samples(self, sample_rate: int) -> int:
        return int(round(self.win_ms * sample_rate / 1000.0))

    def hop_samples(self, sample_rate: int) -> int:
        return int(round(self.hop_ms * sample_rate / 1000.0))


# --------------------------------------------------------------------------
# I/O


def load_wav(path) -> AudioBuffer:
    """Read a 16-bit PCM mono WAV file, scaling samples by 1/32768."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        with wave.open(str(path), "rb") as w:
            n_channels = w.getnchannels()
            width = w.getsampwidth()
            rate = w.getframerate()
            frames = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as exc:
        raise UnsupportedEncodingError(f"{path}: {exc}") from exc
    if n_channels != 1:
        raise NotMonoError(f"{path}: expected mono, found {n_channels} channels")
    if width != 2:
        raise UnsupportedEncodingError(f"{path}: expected 16-bit PCM, found {8 * width}-bit")
    if not frames:
        raise EmptyAudioError(str(path))
    pcm = np.frombuffer(frames, dtype="<i2")
    return AudioBuffer(pcm.astype(np.float64) / 32768.0, rate)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    scaled = np.round(np.asarray(samples, dtype=np.float64) * 32768.0)
    return np.clip(scaled, -32768, 32767).astype("<i2")


def save_wav(path, buf: AudioBuffer) -> Path:
    if len(buf) == 0:
        raise EmptyAudioError(str(path))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(buf.sample_rate_hz)
        w.writeframes(to_pcm16(buf.samples).tobytes())
    return path


# --------------------------------------------------------------------------
# Energy and mixing


def rms(buf: AudioBuffer) -> float:
    if len(buf) == 0:
        raise EmptyAudioError()
    return float(np.sqrt(np.mean(np.square(buf.samples))))


def tile_noise(noise: np.ndarray, length: int, offset: int) -> np.ndarray:
    """Crop or cyclically repeat ``noise`` to ``length`` samples starting at ``offset``."""
    if offset >= len(noise):
        raise ValueError(f"offset {offset} outside noise clip of length {len(noise)}")
    idx = (offset + np.arange(length)) % len(noise)
    return noise[idx]


def mix_gain(clean_rms: float, noise_rms: float, snr_db: float) -> float:
    return (clean_rms / noise_rms) * 10.0 ** (-snr_db / 20.0)


def mix_components(clean: AudioBuffer, noise: AudioBuffer, spec: MixSpec):
    """Return the scaled (speech, noise) pair whose sum is the mixture.

    Both components share one rescaling factor when the sum would clip, so
    their energy ratio is always exactly ``spec.snr_db``.
    """
    if clean.sample_rate_hz != noise.sample_rate_hz:
        raise SampleRateMismatchError(
            f"clean at {clean.sample_rate_hz} Hz, noise at {noise.sample_rate_hz} Hz"
        )
    clean_rms = rms(clean)
    if clean_rms == 0.0:
        raise ZeroEnergyError("clean signal has zero energy")
    if rms(noise) == 0.0:
        raise ZeroEnergyError(f"noise clip {spec.noise_clip_id!r} has zero energy")
    cropped = tile_noise(noise.samples, len(clean), spec.noise_offset_samples)
    cropped_rms = float(np.sqrt(np.mean(np.square(cropped))))
    if cropped_rms == 0.0:
        raise ZeroEnergyError(f"noise segment of {spec.noise_clip_id!r} has zero energy")
    speech = clean.samples.copy()
    scaled_noise = mix_gain(clean_rms, cropped_rms, spec.snr_db) * cropped
    peak = np.max(np.abs(speech + scaled_noise))
    if peak > 1.0:
        speech /= peak
        scaled_noise /= peak
    return speech, scaled_noise


def mix_at_snr(clean: AudioBuffer, noise: AudioBuffer, spec: MixSpec) -> AudioBuffer:
    speech, scaled_noise = mix_components(clean, noise, spec)
    return AudioBuffer(speech + scaled_noise, clean.sample_rate_hz)


def measured_snr_db(speech: np.ndarray, noise: np.ndarray) -> float:
    return 20.0 * math.log10(
        float(np.sqrt(np.mean(np.square(speech)))) / float(np.sqrt(np.mean(np.square(noise))))
    )


# --------------------------------------------------------------------------
# Speed perturbation


def _resample_linear(samples: np.ndarray, rate: float) -> np.ndarray:
    n_out = int(round(len(samples) / rate))
    positions = np.arange(n_out) * rate
    return np.interp(positions, np.arange(len(samples)), samples)


def speed_perturb(buf: AudioBuffer, factor_percent: int) -> AudioBuffer:
    """Play ``buf`` back at ``factor_percent``/100 speed (pitch shifts with it)."""
    if factor_percent not in SPEED_FACTORS:
        raise InvalidSpeedError(f"speed factor must be one of {SPEED_FACTORS}, got {factor_percent}")
    if factor_percent == 100:
        return AudioBuffer(buf.samples.copy(), buf.sample_rate_hz)
    return AudioBuffer(_resample_linear(buf.samples, factor_percent / 100.0), buf.sample_rate_hz)


# --------------------------------------------------------------------------
# Log-mel front end


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels, n_fft, sample_rate, fmin, fmax) -> np.ndarray:
    """Triangular HTK-style filters, shape (n_mels, n_fft // 2 + 1)."""
    bin_hz = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_hz[None, :] - lower) / (center - lower)
    falling = (upper - bin_hz[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def log_mel(buf: AudioBuffer, cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Natural-log mel energies, shape (frames, n_mels)."""
    sr = buf.sample_rate_hz
    if cfg.fmax_hz > sr / 2:
        raise ValueError(f"fmax_hz {cfg.fmax_hz} exceeds Nyquist for {sr} Hz")
    win = cfg.win_samples(sr)
    hop = cfg.hop_samples(sr)
    if len(buf) < win:
        raise TooShortError(f"buffer of {len(buf)} samples is shorter than one {win}-sample window")
    n_frames = (len(buf) - win) // hop + 1
    n_fft = 1 << (win - 1).bit_length()
    frames = np.lib.stride_tricks.sliding_window_view(buf.samples, win)[::hop][:n_frames]
    spectrum = np.fft.rfft(frames * np.hanning(win), n=n_fft, axis=1)
    power = spectrum.real**2 + spectrum.imag**2
    fbank = mel_filterbank(cfg.n_mels, n_fft, sr, cfg.fmin_hz, cfg.fmax_hz)
    energy = power @ fbank.T
    return np.log(np.maximum(energy, cfg.log_floor))


@dataclass
class FeatureCache:
    """Per-utterance memo of log-mel features for each speed factor."""

    audio: AudioBuffer
    cfg: MelConfig
    _by_factor: dict = field(default_factory=dict)

    def get(self, factor: int = 100) -> np.ndarray:
        if factor not in self._by_factor:
            self._by_factor[factor] = log_mel(speed_perturb(self.audio, factor), self.cfg)
        return self._by_factor[factor]
