"""Pure numpy/scipy implementations of the hot kernels.

These are the reference semantics for :mod:`roomvol._kernels` and are used
whenever the compiled extension is unavailable.
"""

import numpy as np
from scipy.signal import lfilter
from numpy.lib.stride_tricks import sliding_window_view

_IMAGE_CHUNK = 8192


def gammatone_analysis(x, poles, gains, window, hop, eps):
    """Filter ``x`` through each complex 4-stage gammatone and frame the output.

    Parameters
    ----------
    x : ndarray, float64, shape (L,)
    poles : ndarray, complex128, shape (B,)
        One-pole coefficient per band; each band cascades four identical stages.
    gains : ndarray, float64, shape (B,)
        Output scale per band (analytic-signal normalisation included).
    window : ndarray, float64, shape (W,)
        Frame weighting.
    hop : int
    eps : float
        Log floor.

    Returns
    -------
    mag, phase : ndarray, float64, shape (B, T)
        Log Hann-weighted RMS envelope per frame and the band phase at each
        frame centre, in (-pi, pi].
    """
    x = np.asarray(x, dtype=np.float64)
    window = np.asarray(window, dtype=np.float64)
    win = window.shape[0]
    n_frames = (x.shape[0] - win) // hop + 1
    centre = win // 2
    wsum = window.sum()
    mag = np.empty((len(poles), n_frames))
    phase = np.empty((len(poles), n_frames))
    for b, (p, g) in enumerate(zip(poles, gains)):
        z = x.astype(np.complex128)
        for _ in range(4):
            z = lfilter([1.0], [1.0, -p], z)
        z = g * z
        env = z.real ** 2 + z.imag ** 2
        frames = sliding_window_view(env, win)[::hop][:n_frames]
        mag[b] = np.log(eps + np.sqrt(frames @ window / wsum))
        zc = z[centre::hop][:n_frames]
        ph = np.arctan2(zc.imag, zc.real)
        ph[ph == -np.pi] = np.pi
        phase[b] = ph
    return mag, phase


def accumulate_images(out, delays, gains, half):
    """Add windowed-sinc fractional-delay impulses into ``out`` in place.

    Each arrival ``j`` contributes ``gains[j] * sinc(n - delays[j]) * w(n -
    delays[j])`` for the ``2 * half + 1`` taps around ``floor(delays[j])``,
    with a Hann window ``w`` vanishing at ``|t| = half + 1``. Exactly integer
    delays contribute a single tap.
    """
    n_out = out.shape[0]
    delays = np.asarray(delays, dtype=np.float64)
    gains = np.asarray(gains, dtype=np.float64)
    n0 = np.floor(delays)
    frac = delays - n0
    n0 = n0.astype(np.int64)

    exact = frac == 0.0
    idx = n0[exact]
    keep = (idx >= 0) & (idx < n_out)
    out += np.bincount(idx[keep], weights=gains[exact][keep], minlength=n_out)[:n_out]

    k = np.arange(-half, half + 1)
    width = half + 1.0
    n0f, frf, gf = n0[~exact], frac[~exact], gains[~exact]
    for s in range(0, n0f.shape[0], _IMAGE_CHUNK):
        t = k[None, :] - frf[s:s + _IMAGE_CHUNK, None]
        taps = gf[s:s + _IMAGE_CHUNK, None] * np.sinc(t) * 0.5 * (1.0 + np.cos(np.pi * t / width))
        idx = n0f[s:s + _IMAGE_CHUNK, None] + k[None, :]
        keep = (idx >= 0) & (idx < n_out)
        out += np.bincount(idx[keep], weights=taps[keep], minlength=n_out)[:n_out]
    return out
