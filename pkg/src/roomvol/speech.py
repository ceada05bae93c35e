"""Deterministic speech-like test signals.

Utterances are sequences of syllables: voiced segments are glottal pulse
trains with a drifting pitch contour shaped by three formant resonators,
unvoiced segments are high-passed noise bursts. Nothing here aims at
intelligibility; the signals only need speech-like spectro-temporal
structure (harmonics, formants, onsets, pauses) for the pipeline.
"""

import numpy as np
from scipy.signal import butter, lfilter

from .features import CLIP_SAMPLES, SAMPLE_RATE, AudioClip

# (F1, F2, F3) in Hz for a handful of vowels.
_VOWELS = np.array([
    [730, 1090, 2440],
    [270, 2290, 3010],
    [530, 1840, 2480],
    [570, 840, 2410],
    [300, 870, 2240],
    [660, 1720, 2410],
    [490, 1350, 1690],
])
_FORMANT_BW = np.array([80.0, 100.0, 140.0])


def _resonator(x, freq, bw, fs):
    r = np.exp(-np.pi * bw / fs)
    theta = 2 * np.pi * freq / fs
    a = [1.0, -2 * r * np.cos(theta), r * r]
    return lfilter([1.0 - r], a, x)


def _voiced(n, f0_start, f0_end, formants, fs, rng):
    f0 = np.linspace(f0_start, f0_end, n) * (1 + 0.01 * rng.standard_normal(n).cumsum() / np.sqrt(n))
    phase = np.cumsum(f0 / fs)
    pulses = np.diff(np.floor(phase), prepend=0.0)
    b, a = butter(2, 800 / (fs / 2))
    src = lfilter(b, a, pulses) + 0.02 * rng.standard_normal(n)
    y = sum(_resonator(src, f, bw, fs) * g
            for f, bw, g in zip(formants, _FORMANT_BW, (1.0, 0.5, 0.25)))
    return y


def _unvoiced(n, fs, rng):
    b, a = butter(4, 2500 / (fs / 2), btype="high")
    return 0.3 * lfilter(b, a, rng.standard_normal(n))


def synthetic_speech(seed, n_samples=CLIP_SAMPLES, fs=SAMPLE_RATE):
    """A speech-like clip of ``n_samples``, RMS-normalised to 0.1 and peak-limited to 0.9."""
    rng = np.random.default_rng(seed)
    out = np.zeros(n_samples)
    base_f0 = rng.uniform(90, 220)
    t = int(rng.uniform(0.05, 0.2) * fs)
    while t < n_samples:
        dur = int(rng.uniform(0.12, 0.32) * fs)
        seg = min(dur, n_samples - t)
        env = np.hanning(seg + 2)[1:-1]
        if rng.random() < 0.8:
            formants = _VOWELS[rng.integers(len(_VOWELS))] * rng.uniform(0.9, 1.1)
            f0a = base_f0 * rng.uniform(0.85, 1.2)
            f0b = f0a * rng.uniform(0.8, 1.1)
            sig = _voiced(seg, f0a, f0b, formants, fs, rng)
        else:
            sig = _unvoiced(seg, fs, rng)
        out[t:t + seg] += env * sig / (np.std(sig) + 1e-12) * rng.uniform(0.5, 1.0)
        gap = rng.uniform(0.03, 0.15) if rng.random() < 0.85 else rng.uniform(0.2, 0.4)
        t += seg + int(gap * fs)
    out *= 0.1 / (np.sqrt(np.mean(out ** 2)) + 1e-12)
    peak = np.abs(out).max()
    if peak > 0.9:
        out *= 0.9 / peak
    return AudioClip(out, fs)
