"""Mono float32 WAV reading and writing."""

import numpy as np
from scipy.io import wavfile

from .errors import AssetError, ParameterError
from .features import AudioClip


def write_wav(path, clip):
    try:
        wavfile.write(str(path), clip.sample_rate, clip.samples.astype(np.float32))
    except OSError as exc:
        raise AssetError(f"cannot write {path}: {exc}") from exc


def read_wav(path, expected_rate=None):
    """Read a mono WAV as float64; integer PCM is scaled to [-1, 1)."""
    try:
        rate, data = wavfile.read(str(path))
    except FileNotFoundError as exc:
        raise AssetError(f"missing audio file {path}") from exc
    except (OSError, ValueError) as exc:
        raise AssetError(f"cannot read {path}: {exc}") from exc
    if data.ndim == 2:
        data = data.mean(axis=1)
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float64) / float(np.iinfo(data.dtype).max + 1)
    if expected_rate is not None and rate != expected_rate:
        raise ParameterError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
    return AudioClip(data.astype(np.float64), int(rate))
