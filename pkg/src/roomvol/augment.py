"""SpecAugment-style augmentation with a waveform round trip.

Log-mel spectrogram -> time warp -> frequency masks -> time masks -> back to a
linear power spectrogram -> Griffin-Lim seeded with the original phase.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.signal import istft, stft

from .errors import ParameterError
from .features import CLIP_SAMPLES, AudioClip

MEL_EPS = 1e-10


@dataclass(frozen=True)
class AugmentParams:
    n_mels: int = 80
    fft_size: int = 512
    mel_hop: int = 160
    n_freq_masks: int = 2
    freq_mask_max: int = 15
    n_time_masks: int = 2
    time_mask_max: int = 100
    time_warp_max: int = 40
    griffin_lim_iters: int = 32
    rng_seed: int = 0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if name != "rng_seed" and value < 0:
                raise ParameterError(f"{name} must be >= 0, got {value}")
        if self.n_mels < 1 or self.fft_size < 2 or self.mel_hop < 1:
            raise ParameterError("n_mels, fft_size and mel_hop must be positive")
        if self.mel_hop > self.fft_size:
            raise ParameterError("mel_hop larger than fft_size leaves gaps")
        if self.freq_mask_max >= self.n_mels:
            raise ParameterError(f"freq_mask_max={self.freq_mask_max} not below n_mels={self.n_mels}")

    def replace(self, **changes):
        return AugmentParams(**{**asdict(self), **changes})


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels, fft_size, fs, fmin=0.0, fmax=None):
    """Triangular HTK-mel filters, shape ``(n_mels, fft_size // 2 + 1)``."""
    fmax = fs / 2 if fmax is None else fmax
    bins = np.linspace(0, fs / 2, fft_size // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bins[None, :] - lo) / (mid - lo)
    down = (hi - bins[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def _stft(x, params, fs):
    _, _, z = stft(x, fs=fs, window="hann", nperseg=params.fft_size,
                   noverlap=params.fft_size - params.mel_hop, nfft=params.fft_size)
    return z


def _istft(z, params, fs, n):
    _, x = istft(z, fs=fs, window="hann", nperseg=params.fft_size,
                 noverlap=params.fft_size - params.mel_hop, nfft=params.fft_size)
    if x.shape[0] < n:
        x = np.pad(x, (0, n - x.shape[0]))
    return x[:n]


def warp_positions(n_frames, centre, shift):
    """Source frame position for each output frame of a piecewise-linear warp.

    Output frame ``centre + shift`` maps to source frame ``centre``; both
    endpoints stay fixed.
    """
    dst = np.arange(n_frames, dtype=np.float64)
    target = centre + shift
    last = n_frames - 1
    return np.where(dst <= target,
                    dst * centre / target,
                    centre + (dst - target) * (last - centre) / (last - target))


def _resample_frames(spec, pos):
    i0 = np.clip(np.floor(pos).astype(int), 0, spec.shape[1] - 1)
    i1 = np.minimum(i0 + 1, spec.shape[1] - 1)
    w = pos - i0
    return spec[:, i0] * (1 - w) + spec[:, i1] * w


def augment_logmel(logmel, params, rng):
    """Apply time warp, then frequency masks, then time masks.

    Returns
    -------
    out : ndarray
        Augmented log-mel spectrogram.
    info : dict
        ``warp`` (centre, shift) or None, ``positions`` (source frame per
        output frame), ``freq_masks``/``time_masks`` as (start, width) lists
        and ``fill``, the per-spectrogram mean used as mask value.
    """
    n_mels, n_frames = logmel.shape
    if params.time_mask_max >= n_frames:
        raise ParameterError(f"time_mask_max={params.time_mask_max} not below {n_frames} frames")
    if params.time_warp_max and 2 * params.time_warp_max + 1 >= n_frames:
        raise ParameterError(f"time_warp_max={params.time_warp_max} too large for {n_frames} frames")
    out = np.array(logmel, dtype=np.float64, copy=True)
    positions = np.arange(n_frames, dtype=np.float64)
    warp = None
    if params.time_warp_max > 0:
        w = params.time_warp_max
        centre = int(rng.integers(w, n_frames - w))
        shift = int(rng.integers(-w, w + 1))
        if shift != 0:
            positions = warp_positions(n_frames, centre, shift)
            out = _resample_frames(out, positions)
        warp = (centre, shift)
    fill = out.mean()
    freq_masks, time_masks = [], []
    for _ in range(params.n_freq_masks):
        width = int(rng.integers(0, params.freq_mask_max + 1))
        start = int(rng.integers(0, n_mels - width + 1))
        out[start:start + width, :] = fill
        freq_masks.append((start, width))
    for _ in range(params.n_time_masks):
        width = int(rng.integers(0, params.time_mask_max + 1))
        start = int(rng.integers(0, n_frames - width + 1))
        out[:, start:start + width] = fill
        time_masks.append((start, width))
    info = {"warp": warp, "positions": positions, "freq_masks": freq_masks,
            "time_masks": time_masks, "fill": fill}
    return out, info


def griffin_lim(magnitude, init_phase, params, fs, n_samples, n_iter=None):
    """Griffin-Lim phase retrieval starting from ``init_phase``."""
    n_iter = params.griffin_lim_iters if n_iter is None else n_iter
    phase = np.exp(1j * init_phase)
    for _ in range(n_iter):
        x = _istft(magnitude * phase, params, fs, n_samples)
        z = _stft(x, params, fs)
        phase = np.exp(1j * np.angle(z))
    return _istft(magnitude * phase, params, fs, n_samples)


def specaugment(clip, params=None, return_info=False):
    """Augment a standardised clip in the log-mel domain and return a waveform.

    The masked log-mel target is mapped back to linear power with the
    non-negative minimum-change pseudo-inverse: starting from the (warped)
    original power spectrogram ``P``, the correction ``pinv(M) @ (target - M P)``
    is added and the result clipped at zero. With no masks and no warp the
    original spectrogram is recovered exactly.
    """
    params = params or AugmentParams()
    if len(clip) != CLIP_SAMPLES:
        raise ParameterError(f"specaugment expects {CLIP_SAMPLES} samples, got {len(clip)}")
    fs = clip.sample_rate
    rng = np.random.default_rng(params.rng_seed)
    z = _stft(clip.samples, params, fs)
    power = np.abs(z) ** 2
    fb = mel_filterbank(params.n_mels, params.fft_size, fs)
    logmel = np.log(fb @ power + MEL_EPS)

    aug, info = augment_logmel(logmel, params, rng)

    pos = info["positions"]
    ref_power = _resample_frames(power, pos)
    ref_phase = np.angle(z)[:, np.clip(np.rint(pos).astype(int), 0, z.shape[1] - 1)]
    target = np.maximum(np.exp(aug) - MEL_EPS, 0.0)
    correction = np.linalg.pinv(fb) @ (target - fb @ ref_power)
    est_power = np.maximum(ref_power + correction, 0.0)

    y = griffin_lim(np.sqrt(est_power), ref_phase, params, fs, CLIP_SAMPLES)
    out = AudioClip(y, fs)
    if return_info:
        info["logmel"] = logmel
        info["augmented_logmel"] = aug
        return out, info
    return out


def snr_db(reference, estimate):
    """Signal-to-error ratio of ``estimate`` against ``reference`` in dB."""
    reference = np.asarray(reference, dtype=np.float64)
    err = reference - np.asarray(estimate, dtype=np.float64)
    return 10 * np.log10(np.sum(reference ** 2) / max(np.sum(err ** 2), 1e-300))
