"""Manifests, leave-one-speaker-out folds, noisy corpora and the synthetic toy corpus."""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .audio import (
    NOISE_CATEGORIES,
    SAMPLE_RATE,
    AudioBuffer,
    MixSpec,
    load_wav,
    mix_at_snr,
    save_wav,
)
from .model import EMOTIONS

MANIFEST_FIELDS = ("id", "wav", "speaker", "session", "transcript", "emotion", "duration_s")
SCENARIOS = (
    "clean",
    "noise_snr15",
    "noise_snr5",
    "music_snr15",
    "music_snr5",
    "speech_snr15",
    "speech_snr5",
)
TRAIN_SNR_RANGE = (5, 35)


class CorpusError(ValueError):
    code = "corpus_error"


class ManifestError(CorpusError):
    code = "manifest_error"


class DuplicateIdError(ManifestError):
    code = "duplicate_id"


class UnknownEmotionError(ManifestError):
    code = "unknown_emotion"


class NoisePoolError(CorpusError):
    code = "noise_pool_error"


@dataclass(frozen=True)
class UtteranceRecord:
    id: str
    wav: str
    speaker: str
    session: str
    transcript: str
    emotion: str
    duration_s: float

    def to_dict(self) -> dict:
        return asdict(self)


def normalize_transcript(text: str) -> str:
    """Lowercase, drop punctuation other than apostrophes, collapse whitespace."""
    text = re.sub(r"[^a-z0-9' ]+", " ", text.lower())
    return " ".join(text.split())


def _record_from(obj, lineno: int, base: Path | None) -> UtteranceRecord:
    if not isinstance(obj, dict):
        raise ManifestError(f"line {lineno}: expected a JSON object")
    missing = [k for k in MANIFEST_FIELDS if k not in obj]
    extra = [k for k in obj if k not in MANIFEST_FIELDS]
    if missing or extra:
        raise ManifestError(f"line {lineno}: missing fields {missing}, unexpected fields {extra}")
    if obj["emotion"] not in EMOTIONS:
        raise UnknownEmotionError(f"line {lineno}: unknown emotion {obj['emotion']!r}")
    try:
        duration = float(obj["duration_s"])
    except (TypeError, ValueError):
        raise ManifestError(f"line {lineno}: duration_s must be a number") from None
    if not duration > 0:
        raise ManifestError(f"line {lineno}: duration_s must be positive")
    wav = str(obj["wav"])
    if base is not None and not Path(wav).is_absolute():
        wav = str(base / wav)
    return UtteranceRecord(
        id=str(obj["id"]),
        wav=wav,
        speaker=str(obj["speaker"]),
        session=str(obj["session"]),
        transcript=str(obj["transcript"]),
        emotion=obj["emotion"],
        duration_s=duration,
    )


def load_manifest(path, resolve_relative: bool = True) -> list[UtteranceRecord]:
    """Parse a JSONL manifest; relative WAV paths resolve against its directory."""
    path = Path(path)
    base = path.parent if resolve_relative else None
    records, seen = [], {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            rec = _record_from(obj, lineno, base)
            if rec.id in seen:
                raise DuplicateIdError(f"line {lineno}: duplicate id {rec.id!r} (first on line {seen[rec.id]})")
            seen[rec.id] = lineno
            records.append(rec)
    return records


def write_manifest(path, records: Iterable[UtteranceRecord], relative_to=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            d = rec.to_dict()
            if relative_to is not None:
                d["wav"] = os.path.relpath(os.path.abspath(d["wav"]), os.path.abspath(relative_to))
            fh.write(json.dumps(d, sort_keys=True) + "\n")
    return path


# --------------------------------------------------------------------------
# Leave-one-speaker-out


@dataclass(frozen=True)
class Fold:
    test_speaker: str
    train_ids: frozenset
    test_ids: frozenset


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple

    def __len__(self):
        return len(self.folds)

    def __iter__(self):
        return iter(self.folds)

    def __getitem__(self, k) -> Fold:
        return self.folds[k]

    def speakers(self) -> list[str]:
        return [f.test_speaker for f in self.folds]


def make_loso_folds(records: Sequence[UtteranceRecord]) -> FoldPlan:
    speakers = sorted({r.speaker for r in records})
    if len(speakers) < 2:
        raise CorpusError(f"leave-one-speaker-out needs at least 2 speakers, found {len(speakers)}")
    folds = []
    for spk in speakers:
        test = frozenset(r.id for r in records if r.speaker == spk)
        train = frozenset(r.id for r in records if r.speaker != spk)
        folds.append(Fold(spk, train, test))
    return FoldPlan(tuple(folds))


# --------------------------------------------------------------------------
# Noise pools and corruption


@dataclass
class NoiseClip:
    id: str
    category: str
    audio: AudioBuffer


@dataclass
class NoisePool:
    clips: dict = field(default_factory=dict)  # category -> list[NoiseClip]

    def __post_init__(self):
        for cat in self.clips:
            if cat not in NOISE_CATEGORIES:
                raise NoisePoolError(f"unknown noise category {cat!r}")

    def require_all(self):
        for cat in NOISE_CATEGORIES:
            if not self.clips.get(cat):
                raise NoisePoolError(f"noise pool has no clips in category {cat!r}")

    def get(self, category: str, clip_id: str) -> NoiseClip:
        for clip in self.clips.get(category, ()):
            if clip.id == clip_id:
                return clip
        raise NoisePoolError(f"no clip {clip_id!r} in category {category!r}")

    def split(self) -> tuple[NoisePool, NoisePool]:
        """Disjoint (train, test) pools: clips alternate by sorted id, test gets the odd ones.

        A category with a single clip is shared by both pools.
        """
        train, test = {}, {}
        for cat, clips in self.clips.items():
            ordered = sorted(clips, key=lambda c: c.id)
            if len(ordered) < 2:
                train[cat] = test[cat] = ordered
            else:
                train[cat] = ordered[0::2]
                test[cat] = ordered[1::2]
        return NoisePool(train), NoisePool(test)


def load_noise_pool(root) -> NoisePool:
    """Read ``root/{noise,music,speech}/**/*.wav`` (MUSAN layout)."""
    root = Path(root)
    clips = {}
    for cat in NOISE_CATEGORIES:
        files = sorted((root / cat).rglob("*.wav")) if (root / cat).exists() else []
        clips[cat] = [NoiseClip(str(f.relative_to(root)), cat, load_wav(f)) for f in files]
    return NoisePool(clips)


def save_noise_pool(pool: NoisePool, root) -> Path:
    root = Path(root)
    for cat, clips in pool.clips.items():
        for clip in clips:
            save_wav(root / clip.id, clip.audio)
    return root


def stable_seed(*parts) -> int:
    """Order-independent 63-bit seed derived from the given values."""
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def _choose_mix(rng: np.random.Generator, pool: NoisePool, category: str, snr_db: float, seed: int) -> MixSpec:
    clips = sorted(pool.clips[category], key=lambda c: c.id)
    clip = clips[int(rng.integers(len(clips)))]
    offset = int(rng.integers(len(clip.audio)))
    return MixSpec(float(snr_db), category, clip.id, offset, seed)


def apply_mix(clean: AudioBuffer, pool: NoisePool, spec: MixSpec) -> AudioBuffer:
    return mix_at_snr(clean, pool.get(spec.noise_category, spec.noise_clip_id).audio, spec)


def _load_clean(rec: UtteranceRecord, audio_cache: dict | None) -> AudioBuffer:
    if audio_cache is not None and rec.id in audio_cache:
        return audio_cache[rec.id]
    return load_wav(rec.wav)


@dataclass
class NoisyCorpus:
    records: list
    provenance: list  # MixSpec per record, same order


def training_mix_spec(rec_id: str, pool: NoisePool, seed: int) -> MixSpec:
    utt_seed = stable_seed("train", seed, rec_id)
    rng = np.random.default_rng(utt_seed)
    category = NOISE_CATEGORIES[int(rng.integers(len(NOISE_CATEGORIES)))]
    snr = int(rng.integers(TRAIN_SNR_RANGE[0], TRAIN_SNR_RANGE[1] + 1))
    return _choose_mix(rng, pool, category, snr, utt_seed)


def corrupt_training_set(
    records: Sequence[UtteranceRecord],
    noise_pool: NoisePool,
    seed: int,
    out_dir=None,
    audio_cache: dict | None = None,
) -> NoisyCorpus:
    """Overlay every utterance once with a random category at a random integer SNR in [5, 35] dB.

    Each utterance's draw depends only on (seed, utterance id). With
    ``out_dir`` the mixtures are written as WAVs and records point at them;
    otherwise mixtures land in ``audio_cache`` (if given) keyed by id.
    """
    noise_pool.require_all()
    out, prov = [], []
    for rec in records:
        spec = training_mix_spec(rec.id, noise_pool, seed)
        mixed = apply_mix(_load_clean(rec, audio_cache), noise_pool, spec)
        out.append(_store(rec, mixed, out_dir, audio_cache))
        prov.append(spec)
    return NoisyCorpus(out, prov)


def _store(rec, mixed: AudioBuffer, out_dir, cache) -> UtteranceRecord:
    if out_dir is not None:
        path = save_wav(Path(out_dir) / f"{rec.id}.wav", mixed)
        return replace(rec, wav=str(path))
    if cache is not None:
        cache[rec.id] = mixed
    return rec


@dataclass
class ScenarioSet:
    name: str
    records: list
    provenance: list  # empty for the clean scenario
    audio: dict = field(default_factory=dict, repr=False)  # id -> AudioBuffer when built in memory

    def __post_init__(self):
        if self.name not in SCENARIOS:
            raise CorpusError(f"unknown scenario {self.name!r}")


def scenario_parts(name: str) -> tuple[str, int]:
    category, snr = name.split("_snr")
    return category, int(snr)


def build_test_scenarios(
    records: Sequence[UtteranceRecord],
    noise_pool: NoisePool,
    seed: int,
    out_dir=None,
    audio_cache: dict | None = None,
) -> list[ScenarioSet]:
    """The clean set plus six noisy copies at exactly 15 and 5 dB per category."""
    noise_pool.require_all()
    scenarios = [ScenarioSet("clean", list(records), [])]
    for name in SCENARIOS[1:]:
        category, snr = scenario_parts(name)
        recs, prov, audio = [], [], {}
        sub = None if out_dir is None else Path(out_dir) / name
        for rec in records:
            utt_seed = stable_seed("test", seed, name, rec.id)
            spec = _choose_mix(np.random.default_rng(utt_seed), noise_pool, category, snr, utt_seed)
            mixed = apply_mix(_load_clean(rec, audio_cache), noise_pool, spec)
            recs.append(_store(rec, mixed, sub, audio))
            prov.append(spec)
        scenarios.append(ScenarioSet(name, recs, prov, audio))
    return scenarios


def write_provenance(path, records: Sequence[UtteranceRecord], provenance: Sequence[MixSpec]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec, spec in zip(records, provenance):
            fh.write(json.dumps({"id": rec.id, **asdict(spec)}, sort_keys=True) + "\n")
    return path


def read_provenance(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                out[obj.pop("id")] = MixSpec.from_dict(obj)
    return out


def write_scenarios(scenarios: Sequence[ScenarioSet], out_dir) -> Path:
    out = Path(out_dir)
    for sc in scenarios:
        write_manifest(out / sc.name / "manifest.jsonl", sc.records, relative_to=out / sc.name)
        if sc.provenance:
            write_provenance(out / sc.name / "provenance.jsonl", sc.records, sc.provenance)
    return out


def load_scenarios(root) -> list[ScenarioSet]:
    root = Path(root)
    out = []
    for name in SCENARIOS:
        records = load_manifest(root / name / "manifest.jsonl")
        prov_path = root / name / "provenance.jsonl"
        prov = []
        if prov_path.exists():
            by_id = read_provenance(prov_path)
            prov = [by_id[r.id] for r in records]
        out.append(ScenarioSet(name, records, prov))
    return out


# --------------------------------------------------------------------------
# Synthetic toy corpus
#
# Every character owns a tone frequency on a log scale; an utterance plays its
# characters in order. The emotion sets a low carrier "voice" (pitch contour
# and modulation), the character loudness envelope and the speaking rate.
# Speakers shift every frequency by a small factor.

WORDS = ("yes", "no", "go", "stop", "up", "down", "left", "right", "on", "off", "red", "blue")
CHARSET = "abcdefghijklmnopqrstuvwxyz '"
CHAR_TONES = dict(zip(CHARSET, np.geomspace(320.0, 3600.0, len(CHARSET))))

EMOTION_STYLE = {
    # carrier f0 start/end Hz, tremolo Hz, tone level, char duration s
    "neutral": dict(f0=(120.0, 120.0), tremolo=0.0, level=0.30, char_s=0.09),
    "happy": dict(f0=(200.0, 260.0), tremolo=0.0, level=0.35, char_s=0.08),
    "sad": dict(f0=(110.0, 85.0), tremolo=0.0, level=0.18, char_s=0.11),
    "angry": dict(f0=(165.0, 165.0), tremolo=9.0, level=0.45, char_s=0.075),
}


def _ramp(n: int, sr: int, ramp_s: float = 0.008) -> np.ndarray:
    k = min(n // 2, int(ramp_s * sr))
    env = np.ones(n)
    if k > 0:
        edge = 0.5 - 0.5 * np.cos(np.pi * np.arange(k) / k)
        env[:k] = edge
        env[-k:] = edge[::-1]
    return env


def render_utterance(
    text: str,
    emotion: str,
    speaker_shift: float,
    rng: np.random.Generator,
    sr: int = SAMPLE_RATE,
) -> np.ndarray:
    style = EMOTION_STYLE[emotion]
    char_n = int(style["char_s"] * sr)
    lead = int(0.1 * sr)
    n = 2 * lead + char_n * len(text)
    t = np.arange(n) / sr
    f0 = np.linspace(*style["f0"], n) * speaker_shift
    carrier = 0.12 * np.sin(2 * np.pi * np.cumsum(f0) / sr) + 0.05 * np.sin(4 * np.pi * np.cumsum(f0) / sr)
    if style["tremolo"]:
        carrier *= 1.0 + 0.8 * np.sin(2 * np.pi * style["tremolo"] * t)
    out = carrier
    for i, ch in enumerate(text):
        lo = lead + i * char_n
        seg_t = np.arange(char_n) / sr
        freq = CHAR_TONES[ch] * speaker_shift
        phase = rng.uniform(0, 2 * np.pi)
        tone = np.sin(2 * np.pi * freq * seg_t + phase) + 0.3 * np.sin(4 * np.pi * freq * seg_t + phase)
        level = style["level"]
        if emotion == "sad":
            level *= np.linspace(1.0, 0.6, char_n)
        out[lo : lo + char_n] += level * tone * _ramp(char_n, sr)
    out = out + 0.002 * rng.standard_normal(n)
    return out / max(1.0, np.max(np.abs(out)) / 0.9)


def speaker_shift(index: int, seed: int) -> float:
    rng = np.random.default_rng(stable_seed("speaker", seed, index))
    return float(1.0 + rng.uniform(-0.02, 0.02))


def synth_toy_corpus(
    n_speakers: int,
    n_per_speaker: int,
    seed: int,
    out_dir,
    words_per_utt: tuple[int, int] = (1, 2),
) -> list[UtteranceRecord]:
    """Write a deterministic synthetic corpus (WAVs + ``manifest.jsonl``) to ``out_dir``."""
    if n_speakers < 2:
        raise CorpusError("synthetic corpus needs at least 2 speakers")
    out = Path(out_dir)
    records = []
    for s in range(n_speakers):
        shift = speaker_shift(s, seed)
        speaker = f"spk{s:02d}"
        for u in range(n_per_speaker):
            utt_id = f"{speaker}_u{u:03d}"
            rng = np.random.default_rng(stable_seed("utt", seed, utt_id))
            emotion = EMOTIONS[(u + s) % len(EMOTIONS)]
            n_words = int(rng.integers(words_per_utt[0], words_per_utt[1] + 1))
            text = " ".join(WORDS[int(i)] for i in rng.integers(len(WORDS), size=n_words))
            samples = render_utterance(text, emotion, shift, rng)
            buf = AudioBuffer(samples)
            path = save_wav(out / "wav" / f"{utt_id}.wav", buf)
            records.append(
                UtteranceRecord(
                    id=utt_id,
                    wav=str(path),
                    speaker=speaker,
                    session=f"ses{s // 2 + 1:02d}",
                    transcript=text,
                    emotion=emotion,
                    duration_s=round(buf.duration_s, 6),
                )
            )
    write_manifest(out / "manifest.jsonl", records, relative_to=out)
    return records


def synth_noise_pool(seed: int, clips_per_category: int = 4, duration_s: float = 3.0) -> NoisePool:
    """Synthetic stand-ins for the three MUSAN categories.

    noise: low-passed Gaussian noise; music: random chord sequences with
    harmonics; speech: babble of three overlapping toy talkers.
    """
    sr = SAMPLE_RATE
    n = int(duration_s * sr)
    clips = {cat: [] for cat in NOISE_CATEGORIES}
    for k in range(clips_per_category):
        rng = np.random.default_rng(stable_seed("noise", seed, k))
        white = rng.standard_normal(n)
        smooth = np.convolve(white, np.ones(4) / 4, mode="same")
        clips["noise"].append(NoiseClip(f"noise/noise-{k:04d}.wav", "noise", AudioBuffer(0.3 * smooth / np.max(np.abs(smooth)))))

        rng = np.random.default_rng(stable_seed("music", seed, k))
        music = np.zeros(n)
        note_n = int(0.25 * sr)
        t = np.arange(note_n) / sr
        for lo in range(0, n, note_n):
            root = 110.0 * 2 ** (rng.integers(0, 24) / 12)
            chord = np.zeros(note_n)
            for interval in (0, 4, 7):
                f = root * 2 ** (interval / 12)
                for h in (1, 2, 3):
                    chord += np.sin(2 * np.pi * f * h * t) / h
            seg = chord[: n - lo] * np.exp(-3 * t[: n - lo])
            music[lo : lo + note_n] += seg
        clips["music"].append(NoiseClip(f"music/music-{k:04d}.wav", "music", AudioBuffer(0.5 * music / np.max(np.abs(music)))))

        rng = np.random.default_rng(stable_seed("babble", seed, k))
        babble = np.zeros(n)
        for _ in range(3):
            pos = 0
            while pos < n:
                words = " ".join(WORDS[int(i)] for i in rng.integers(len(WORDS), size=3))
                emo = EMOTIONS[int(rng.integers(4))]
                seg = render_utterance(words, emo, float(rng.uniform(0.9, 1.1)), rng)
                take = min(len(seg), n - pos)
                babble[pos : pos + take] += seg[:take]
                pos += take
        clips["speech"].append(NoiseClip(f"speech/speech-{k:04d}.wav", "speech", AudioBuffer(0.5 * babble / np.max(np.abs(babble)))))
    return NoisePool(clips)


def dataset_stats(records: Sequence[UtteranceRecord]) -> dict:
    counts = {e: 0 for e in EMOTIONS}
    for r in records:
        counts[r.emotion] += 1
    return {
        "utterances": len(records),
        "speakers": len({r.speaker for r in records}),
        "hours": round(math.fsum(r.duration_s for r in records) / 3600, 4),
        "emotions": counts,
    }
