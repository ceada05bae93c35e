"""Adapting image-pretrained transformer weights to single-channel feature blocks."""

from __future__ import annotations

import numpy as np

from .errors import ParameterError


def adapt_channel_average(w3, bias=None):
    """Collapse a 3-channel patch projection to one channel by averaging.

    Parameters
    ----------
    w3 : ndarray, shape (D, 3, ph, pw)
        Convolutional patch-embedding kernel of an RGB model.
    bias : ndarray, shape (D,), optional
        Returned unchanged.

    Returns
    -------
    w1 : ndarray, shape (D, ph, pw)
    bias : ndarray or None
    """
    w3 = np.asarray(w3, dtype=np.float64)
    if w3.ndim != 4 or w3.shape[1] != 3:
        raise ParameterError(f"expected a (D, 3, ph, pw) kernel, got shape {w3.shape}")
    return w3.mean(axis=1), (None if bias is None else np.array(bias, dtype=np.float64))


def kernel_to_projection(w1):
    """(D, ph, pw) kernel -> (ph*pw, D) matrix acting on row-major flattened patches."""
    w1 = np.asarray(w1, dtype=np.float64)
    return w1.reshape(w1.shape[0], -1).T.copy()


def _grid_shape(grid):
    if hasattr(grid, "n_f"):
        return grid.n_f, grid.n_t
    gf, gt = grid
    return int(gf), int(gt)


def _resize_axis(x, axis, size):
    """Centre-cut when shrinking, corner-aligned linear interpolation when growing."""
    n = x.shape[axis]
    if size == n:
        return x
    if size < n:
        start = (n - size) // 2
        return np.take(x, np.arange(start, start + size), axis=axis)
    if n == 1:
        return np.repeat(x, size, axis=axis)
    pos = np.linspace(0.0, n - 1, size)
    i0 = np.minimum(np.floor(pos).astype(int), n - 2)
    frac = pos - i0
    shape = [1] * x.ndim
    shape[axis] = size
    frac = frac.reshape(shape)
    return np.take(x, i0, axis=axis) * (1 - frac) + np.take(x, i0 + 1, axis=axis) * frac


def interpolate_positional(pos_src, src_grid, tgt_grid):
    """Resize a positional table (row 0 = [CLS]) from one patch grid to another.

    Grid rows are feature-major like :func:`roomvol.model.patchify`. Each
    axis is cut to its central region when the target is smaller, and
    bilinearly interpolated with aligned corners when it is larger.
    """
    pos_src = np.asarray(pos_src, dtype=np.float64)
    sf, st = _grid_shape(src_grid)
    tf, tt = _grid_shape(tgt_grid)
    if min(sf, st, tf, tt) < 1:
        raise ParameterError("grid dimensions must be >= 1")
    if pos_src.ndim != 2 or pos_src.shape[0] != sf * st + 1:
        raise ParameterError(f"table with {pos_src.shape[0]} rows does not match a "
                             f"{sf}x{st} grid plus [CLS]")
    grid = pos_src[1:].reshape(sf, st, -1)
    grid = _resize_axis(grid, 0, tf)
    grid = _resize_axis(grid, 1, tt)
    return np.vstack([pos_src[:1], grid.reshape(tf * tt, -1)])
