"""Deterministic synthetic audio: the corpus the toy codec trains on, the
pseudo-speech the toy victim transcribes, and carrier material for
experiments.

Pseudo-speech is formant-style synthesis over a 31-symbol alphabet. Each
symbol is identified by a chord of two low partials (all below 1.9 kHz, so
the identity survives aggressive band truncation) plus one bright partial
above 2.5 kHz that cheap channels discard. Every generator takes an explicit
seed and is reproducible.
"""

from __future__ import annotations

import numpy as np
from scipy import signal as sps

from .audio import Waveform

# space first, then letters, then four digits; the transcriber's blank symbol
# is not part of the acoustic alphabet
ALPHABET = " abcdefghijklmnopqrstuvwxyz0123"

_LOW_A = np.array([170.0, 220.0, 285.0, 370.0, 480.0, 620.0])
_LOW_B = np.array([760.0, 935.0, 1150.0, 1415.0, 1645.0, 1870.0])
_HIGH_BASE = 2600.0
_HIGH_STEP = 85.0


def symbol_frequencies(index: int) -> tuple:
    """(low1, low2, high) partial frequencies for one alphabet symbol."""
    if not 0 <= index < len(ALPHABET):
        raise ValueError("symbol index out of range")
    return (float(_LOW_A[index % 6]),
            float(_LOW_B[index // 6]),
            _HIGH_BASE + _HIGH_STEP * index)


def _envelope(n: int, rate: int) -> np.ndarray:
    ramp = max(2, int(0.008 * rate))
    env = np.ones(n)
    env[:ramp] = np.linspace(0.0, 1.0, ramp)
    env[-ramp:] *= np.linspace(1.0, 0.0, ramp)
    # slight onset emphasis marks unit boundaries
    onset = min(n, int(0.012 * rate))
    env[:onset] *= 1.25
    return env


def _symbol_unit(ch: str, rate: int, n: int, rng: np.random.Generator) -> np.ndarray:
    idx = ALPHABET.index(ch)
    t = np.arange(n) / rate
    if ch == " ":
        unit = 0.08 * rng.standard_normal(n)
    else:
        f1, f2, f3 = symbol_frequencies(idx)
        unit = (0.40 * np.sin(2 * np.pi * f1 * t)
                + 0.40 * np.sin(2 * np.pi * f2 * t)
                + 0.30 * np.sin(2 * np.pi * f3 * t))
    return unit * _envelope(n, rate)


def synthesize_transcript(text: str, rate: int, duration_s: float,
                          seed: int = 0) -> Waveform:
    """Render a transcript as uniformly spaced symbol units: unit i occupies
    [i*L/n, (i+1)*L/n), matching the transcriber's alignment convention."""
    if not text:
        raise ValueError("empty transcript")
    bad = set(text) - set(ALPHABET)
    if bad:
        raise ValueError("transcript contains symbols outside the alphabet: %r" % sorted(bad))
    rng = np.random.default_rng(seed)
    total = int(round(duration_s * rate))
    out = np.zeros(total)
    n = len(text)
    for i, ch in enumerate(text):
        a, b = (i * total) // n, ((i + 1) * total) // n
        if b > a:
            out[a:b] = _symbol_unit(ch, rate, b - a, rng)
    return Waveform(out, rate)


def random_words(rng: np.random.Generator, n_words: int,
                 min_len: int = 2, max_len: int = 5) -> str:
    letters = ALPHABET[1:27]
    words = []
    for _ in range(n_words):
        length = int(rng.integers(min_len, max_len + 1))
        words.append("".join(rng.choice(list(letters)) for _ in range(length)))
    return " ".join(words)


# ---------------------------------------------------------------------------
# Non-speech clip generators
# ---------------------------------------------------------------------------

def sine_clip(rate: int, duration_s: float, rng: np.random.Generator) -> np.ndarray:
    n = int(rate * duration_s)
    t = np.arange(n) / rate
    freq = float(np.exp(rng.uniform(np.log(80.0), np.log(min(9000.0, 0.4 * rate)))))
    amp = rng.uniform(0.15, 0.6)
    return amp * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))


def chirp_clip(rate: int, duration_s: float, rng: np.random.Generator) -> np.ndarray:
    n = int(rate * duration_s)
    t = np.arange(n) / rate
    f0 = rng.uniform(100.0, 2000.0)
    f1 = rng.uniform(500.0, min(9000.0, 0.4 * rate))
    amp = rng.uniform(0.15, 0.5)
    return amp * sps.chirp(t, f0=f0, f1=f1, t1=duration_s, method="logarithmic")


def filtered_noise_clip(rate: int, duration_s: float, rng: np.random.Generator) -> np.ndarray:
    n = int(rate * duration_s)
    lo = float(np.exp(rng.uniform(np.log(100.0), np.log(0.2 * rate))))
    hi = min(lo * rng.uniform(1.5, 6.0), 0.45 * rate)
    sos = sps.butter(4, [lo, hi], btype="band", fs=rate, output="sos")
    x = sps.sosfilt(sos, rng.standard_normal(n))
    peak = np.max(np.abs(x)) or 1.0
    return rng.uniform(0.2, 0.5) * x / peak


def music_clip(rate: int, duration_s: float, rng: np.random.Generator) -> np.ndarray:
    n = int(rate * duration_s)
    t = np.arange(n) / rate
    root = rng.uniform(110.0, 440.0)
    out = np.zeros(n)
    for harmonic in (1.0, 1.5, 2.0, 3.0):
        amp = rng.uniform(0.05, 0.25)
        lfo = 1.0 + 0.3 * np.sin(2 * np.pi * rng.uniform(0.3, 2.0) * t + rng.uniform(0, 6.28))
        out += amp * lfo * np.sin(2 * np.pi * root * harmonic * t)
    return out


def speech_clip(rate: int, duration_s: float, rng: np.random.Generator) -> np.ndarray:
    words = random_words(rng, int(rng.integers(2, 5)))
    return synthesize_transcript(words, rate, duration_s,
                                 seed=int(rng.integers(2 ** 31))).samples


def codec_corpus(n_clips: int, rate: int, duration_s: float, seed: int) -> list:
    """Mixed training material for the toy latent codec."""
    rng = np.random.default_rng(seed)
    makers = (sine_clip, chirp_clip, filtered_noise_clip, music_clip, speech_clip)
    clips = []
    for i in range(n_clips):
        samples = makers[i % len(makers)](rate, duration_s, rng)
        clips.append(Waveform(samples, rate))
    return clips


def victim_pairs(n_pairs: int, rate: int, duration_s: float, seed: int,
                 min_words: int = 1, max_words: int = 4) -> list:
    """(Waveform, transcript) supervision for the toy transcriber."""
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_pairs):
        text = random_words(rng, int(rng.integers(min_words, max_words + 1)))
        w = synthesize_transcript(text, rate, duration_s, seed=int(rng.integers(2 ** 31)))
        pairs.append((w, text))
    return pairs


def carrier_clip(kind: str, rate: int, duration_s: float, seed: int) -> Waveform:
    """One named carrier for scenario manifests: speech or music."""
    rng = np.random.default_rng(seed)
    if kind == "speech":
        return Waveform(speech_clip(rate, duration_s, rng), rate)
    if kind == "music":
        return Waveform(music_clip(rate, duration_s, rng), rate)
    raise ValueError("unknown carrier kind %r" % kind)
