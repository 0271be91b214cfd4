"""
Mixing noise at a target SNR
============================

The noise clip is tiled from an offset to the speech length and scaled so
that 10 log10(P_speech / P_noise) hits the requested value.
"""

import numpy as np

from jointser import AudioBuffer, MixSpec, mix_at_snr
from jointser.audio import measured_snr_db, mix_components
from jointser.corpus import synth_noise_pool

rng = np.random.default_rng(0)
t = np.arange(16000) / 16000
speech = AudioBuffer(0.3 * np.sin(2 * np.pi * 220 * t) * (1 + 0.2 * rng.standard_normal(t.size)))
pool = synth_noise_pool(seed=0, clips_per_category=1, duration_s=0.5)

for category in ("noise", "music", "speech"):
    clip = pool.clips[category][0]
    for snr in (5, 15, 35):
        spec = MixSpec(snr, category, clip.id, noise_offset_samples=123)
        s, n = mix_components(speech, clip.audio, spec)
        mixed = mix_at_snr(speech, clip.audio, spec)
        print(f"{category:6s} target {snr:2d} dB  measured {measured_snr_db(s, n):.6f}  peak {np.abs(mixed.samples).max():.3f}")
