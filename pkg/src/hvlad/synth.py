"""Synthetic speakers for tests and demos.

Each speaker is a harmonic comb on its own fundamental, shaped by two
formant-like resonances: a crude stand-in for a voice's spectral signature.
Utterances are that comb under a random syllable-rate amplitude envelope plus
a little noise.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dsp


@dataclass(frozen=True)
class SpeakerProfile:
    name: str
    partials_hz: tuple
    weights: tuple


def _formant_weights(freqs, centers, bandwidth):
    w = sum(np.exp(-0.5 * ((freqs - c) / bandwidth) ** 2) for c in centers)
    return 0.15 + w


def make_profiles(n_speakers, seed=0, f0_range=(90.0, 260.0), hi_hz=3200.0, prefix="s"):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_speakers):
        f0 = rng.uniform(*f0_range)
        f = f0 * np.arange(1, int(hi_hz // f0) + 1)
        formants = rng.uniform(300.0, 3000.0, size=2)
        w = _formant_weights(f, formants, 250.0)
        out.append(SpeakerProfile(f"{prefix}{i:03d}", tuple(np.round(f, 1)), tuple(np.round(w, 3))))
    return out


def _envelope(n, rate, rng):
    t = np.arange(n) / rate
    syll = rng.uniform(2.5, 5.0)
    phase = rng.uniform(0, 2 * np.pi)
    env = 0.55 + 0.45 * np.sin(2 * np.pi * syll * t + phase)
    return env * (0.8 + 0.2 * np.sin(2 * np.pi * rng.uniform(0.2, 0.6) * t))


def synth_utterance(profile: SpeakerProfile, duration_s, rng, rate=dsp.DEFAULT_SAMPLE_RATE,
                    noise=0.02) -> dsp.Waveform:
    n = int(round(duration_s * rate))
    t = np.arange(n) / rate
    x = np.zeros(n)
    jitter = 1.0 + rng.uniform(-0.01, 0.01)
    for f, w in zip(profile.partials_hz, profile.weights):
        x += w * np.sin(2 * np.pi * f * jitter * t + rng.uniform(0, 2 * np.pi))
    x *= _envelope(n, rate, rng)
    x += noise * rng.standard_normal(n)
    return dsp.Waveform(0.9 * x / np.max(np.abs(x)), rate)


def write_corpus(root, n_speakers=10, n_utts=20, seed=0, min_s=1.5, max_s=3.5,
                 rate=dsp.DEFAULT_SAMPLE_RATE, prefix="s"):
    """Write ``root/<speaker>/<speaker>_NNN.wav`` and return the profiles."""
    root = Path(root)
    profiles = make_profiles(n_speakers, seed=seed, prefix=prefix)
    rng = np.random.default_rng(seed + 1)
    for p in profiles:
        d = root / p.name
        d.mkdir(parents=True, exist_ok=True)
        for u in range(n_utts):
            w = synth_utterance(p, rng.uniform(min_s, max_s), rng, rate)
            dsp.write_wav(d / f"{p.name}_{u:03d}.wav", w)
    return profiles
