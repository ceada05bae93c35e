"""Gammatone magnitude + low-band phase feature blocks.

A 4 s clip at 16 kHz is filtered through a 20-band complex gammatone bank
(50-2000 Hz, ERB spaced), framed with a 64-sample Hann window at hop 32, and
stacked into a 30 x 1997 block::

    rows  0-19  log Hann-weighted RMS envelope per band
    rows 20-24  band phase at the frame centre (lowest five bands)
    rows 25-29  wrapped phase difference to the next band up
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import get_window

from . import kernels
from .errors import DataFormatError, NumericalError, ParameterError

SAMPLE_RATE = 16000
CLIP_SAMPLES = 64000
N_BANDS = 20
N_PHASE_BANDS = 5
FMIN = 50.0
FMAX = 2000.0
WINDOW = 64
HOP = 32
N_FRAMES = 1997
N_FEATURES = N_BANDS + 2 * N_PHASE_BANDS
LOG_EPS = 1e-10

RVFB_MAGIC = b"RVFB"


@dataclass(frozen=True)
class AudioClip:
    """Mono sample buffer.

    Parameters
    ----------
    samples : ndarray
        Amplitudes, nominally in [-1, 1].
    sample_rate : int
        Sampling rate in Hz.
    """

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1:
            raise ParameterError(f"AudioClip must be mono, got shape {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ParameterError("AudioClip contains non-finite samples")
        if self.sample_rate <= 0:
            raise ParameterError(f"invalid sample rate {self.sample_rate}")
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self):
        return len(self) / self.sample_rate


def standardize_length(clip, n_samples=CLIP_SAMPLES):
    """Truncate or right-pad with zeros to exactly ``n_samples``."""
    s = clip.samples[:n_samples]
    if s.shape[0] < n_samples:
        s = np.pad(s, (0, n_samples - s.shape[0]))
    return AudioClip(s, clip.sample_rate)


# ---------------------------------------------------------------------------
# Gammatone filterbank
# ---------------------------------------------------------------------------


def erb_number(f):
    """ERB-number scale, ``21.4 * log10(0.00437 f + 1)``."""
    return 21.4 * np.log10(0.00437 * np.asarray(f, dtype=np.float64) + 1.0)


def erb_number_to_hz(e):
    """Inverse of :func:`erb_number`."""
    return (10.0 ** (np.asarray(e, dtype=np.float64) / 21.4) - 1.0) / 0.00437


def erb_bandwidth(f):
    """Glasberg & Moore equivalent rectangular bandwidth in Hz."""
    return 24.7 * (0.00437 * np.asarray(f, dtype=np.float64) + 1.0)


def erb_center_frequencies(n, fmin, fmax, fs=SAMPLE_RATE):
    """``n`` centre frequencies equally spaced on the ERB-number scale.

    The endpoints are exactly ``fmin`` and ``fmax``.
    """
    if n < 2:
        raise ParameterError(f"need at least 2 bands, got {n}")
    if not 0 < fmin < fmax < fs / 2:
        raise ParameterError(f"need 0 < fmin < fmax < fs/2, got {fmin}, {fmax}, fs={fs}")
    cf = erb_number_to_hz(np.linspace(erb_number(fmin), erb_number(fmax), n))
    cf[0], cf[-1] = fmin, fmax
    return cf


@dataclass(frozen=True)
class GammatoneBank:
    """Complex 4th-order gammatone filters realised as four cascaded one-pole stages.

    Band ``k`` has transfer function ``norm_k / (1 - p_k z^-1)^4`` with
    ``p_k = a_k exp(j w_k)``; ``norm_k = (1 - a_k)^4`` puts the magnitude peak
    at exactly 0 dB on the centre frequency. The analytic band signal is twice
    the complex filter output.
    """

    center_freqs: np.ndarray
    bandwidths: np.ndarray
    poles: np.ndarray
    norms: np.ndarray
    fs: int

    @property
    def n_bands(self):
        return self.center_freqs.shape[0]

    def response(self, freqs):
        """Complex frequency response, shape ``(n_bands, len(freqs))``."""
        w = 2 * np.pi * np.asarray(freqs, dtype=np.float64) / self.fs
        zinv = np.exp(-1j * w)[None, :]
        return self.norms[:, None] / (1.0 - self.poles[:, None] * zinv) ** 4

    def filter(self, x):
        """Analytic band signals for ``x``, shape ``(n_bands, len(x))``."""
        from scipy.signal import lfilter

        x = np.asarray(x, dtype=np.float64)
        out = np.empty((self.n_bands, x.shape[0]), dtype=np.complex128)
        for k, p in enumerate(self.poles):
            z = x.astype(np.complex128)
            for _ in range(4):
                z = lfilter([1.0], [1.0, -p], z)
            out[k] = 2.0 * self.norms[k] * z
        return out


def design_gammatone_bank(n=N_BANDS, fmin=FMIN, fmax=FMAX, fs=SAMPLE_RATE):
    """Design an ERB-spaced complex gammatone bank with unit peak gain per band."""
    cf = erb_center_frequencies(n, fmin, fmax, fs)
    bw = 1.019 * erb_bandwidth(cf)
    a = np.exp(-2 * np.pi * bw / fs)
    poles = a * np.exp(2j * np.pi * cf / fs)
    if np.any(np.abs(poles) >= 1.0):
        raise NumericalError("unstable gammatone pole set")
    return GammatoneBank(center_freqs=cf, bandwidths=bw, poles=poles,
                         norms=(1.0 - a) ** 4, fs=fs)


# ---------------------------------------------------------------------------
# Analysis
# ---------------------------------------------------------------------------


def frame_count(n_samples, window=WINDOW, hop=HOP):
    return (n_samples - window) // hop + 1


def analyze_clip(clip, bank, window=WINDOW, hop=HOP):
    """Log-envelope and phase per band and frame.

    Returns
    -------
    mag, phase : ndarray, shape (n_bands, T_raw)
        ``T_raw = (L - window) // hop + 1``. ``mag`` is
        ``log(eps + Hann-weighted RMS of |z|)`` over each frame; ``phase`` is
        ``arg z`` at the frame centre, in (-pi, pi].
    """
    if clip.sample_rate != bank.fs:
        raise ParameterError(f"clip rate {clip.sample_rate} != bank rate {bank.fs}")
    if len(clip) < window:
        raise ParameterError(f"clip of {len(clip)} samples is shorter than one window ({window})")
    if hop < 1:
        raise ParameterError(f"hop must be positive, got {hop}")
    win = get_window("hann", window).astype(np.float64)
    return kernels.gammatone_analysis(
        np.ascontiguousarray(clip.samples), np.ascontiguousarray(bank.poles),
        np.ascontiguousarray(2.0 * bank.norms), win, int(hop), LOG_EPS)


def wrap_phase(x):
    """Wrap angles into (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(x, dtype=np.float64), 2 * np.pi)


def phase_features(phase, n_low=N_PHASE_BANDS):
    """Low-band phase rows and their wrapped differences along the band axis."""
    phase = np.asarray(phase, dtype=np.float64)
    if n_low > phase.shape[0]:
        raise ParameterError(f"n_low={n_low} exceeds band count {phase.shape[0]}")
    if n_low == phase.shape[0]:
        raise ParameterError("phase difference needs one band above the n_low rows")
    low = phase[:n_low].copy()
    dphase = wrap_phase(phase[1:n_low + 1] - phase[:n_low])
    return low, dphase


@dataclass(frozen=True)
class FeatureStats:
    """Per-row mean/std used to standardise the magnitude rows."""

    mean: np.ndarray
    std: np.ndarray

    def to_json(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, obj):
        return cls(np.asarray(obj["mean"], dtype=np.float64),
                   np.asarray(obj["std"], dtype=np.float64))

    @classmethod
    def fit(cls, blocks, n_rows=N_BANDS):
        """Statistics over all frames of ``blocks`` (an (N, F, T) array or list)."""
        mags = np.stack([np.asarray(b)[:n_rows] for b in blocks])
        mean = mags.mean(axis=(0, 2))
        std = mags.std(axis=(0, 2))
        return cls(mean, np.where(std > 0, std, 1.0))


def standardize_rows(data, stats):
    """Standardise the leading magnitude rows in a copy of ``data``."""
    out = np.array(data, dtype=np.float64, copy=True)
    if stats is None:
        return out
    n = stats.mean.shape[0]
    out[..., :n, :] = (out[..., :n, :] - stats.mean[:, None]) / stats.std[:, None]
    return out


@dataclass(frozen=True)
class FeatureBlock:
    """``F x T`` feature matrix."""

    data: np.ndarray = field(repr=False)

    @property
    def shape(self):
        return self.data.shape

    @property
    def magnitude(self):
        return self.data[:N_BANDS]

    @property
    def phase(self):
        return self.data[N_BANDS:N_BANDS + N_PHASE_BANDS]

    @property
    def dphase(self):
        return self.data[N_BANDS + N_PHASE_BANDS:]


def assemble_feature_block(mag, phase_low, dphase, t_target=N_FRAMES, stats=None):
    """Stack magnitude, phase and phase-difference rows; fit the time axis to ``t_target``."""
    mag, phase_low, dphase = (np.asarray(a, dtype=np.float64) for a in (mag, phase_low, dphase))
    t_raw = mag.shape[1]
    if phase_low.shape[1] != t_raw or dphase.shape[1] != t_raw:
        raise ParameterError(
            f"frame counts differ: mag {t_raw}, phase {phase_low.shape[1]}, dphase {dphase.shape[1]}")
    data = np.vstack([mag, phase_low, dphase])
    if t_raw >= t_target:
        data = data[:, :t_target]
    else:
        data = np.pad(data, ((0, 0), (0, t_target - t_raw)))
    data = standardize_rows(data, stats)
    if not np.all(np.isfinite(data)):
        raise NumericalError("non-finite value in feature block")
    return FeatureBlock(data)


def featurize_clip(clip, bank=None, stats=None):
    """Full pipeline: standardise length, analyse, and assemble a 30 x 1997 block."""
    bank = bank if bank is not None else design_gammatone_bank()
    clip = standardize_length(clip)
    mag, phase = analyze_clip(clip, bank)
    low, dph = phase_features(phase)
    return assemble_feature_block(mag, low, dph, stats=stats)


# ---------------------------------------------------------------------------
# RVFB file format
# ---------------------------------------------------------------------------


def write_rvfb(path, block):
    """Write ``RVFB | u32 F | u32 T | F*T float32``, all little-endian, row-major."""
    data = np.asarray(block.data if isinstance(block, FeatureBlock) else block)
    if data.ndim != 2:
        raise ParameterError(f"feature data must be 2-D, got {data.shape}")
    f, t = data.shape
    payload = np.ascontiguousarray(data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(RVFB_MAGIC + struct.pack("<II", f, t) + payload)


def read_rvfb(path):
    """Read an RVFB file into a float32 ``(F, T)`` array."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != RVFB_MAGIC:
        raise DataFormatError(f"{path}: not an RVFB file")
    f, t = struct.unpack("<II", raw[4:12])
    if len(raw) != 12 + 4 * f * t:
        raise DataFormatError(f"{path}: expected {f}x{t} values, file size {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=12).reshape(f, t).astype(np.float32)
