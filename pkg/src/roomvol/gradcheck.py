"""Central finite-difference check of the analytic model gradients."""

from __future__ import annotations

import numpy as np

from .model import backward, forward


def _loss_and_grads(params, x, target, dropout_seed):
    rng = None if dropout_seed is None else np.random.default_rng(dropout_seed)
    y, cache = forward(x, params, rng)
    diff = y - target
    return 0.5 * float(np.sum(diff * diff)), backward(cache, diff)


def check_gradients(params, x, target, eps=1e-6, dropout_seed=None, max_entries=None, seed=0):
    """Compare ``backward`` with central differences of ``0.5 * sum((y - target)**2)``.

    Parameters
    ----------
    params : ModelParams
        Perturbed in place and restored.
    x : ndarray, shape (B, F, T)
    target : ndarray, shape (B,)
    eps : float
        Finite-difference step.
    dropout_seed : int, optional
        Runs in training mode with identical dropout masks for every
        evaluation; ``None`` checks the deterministic path.
    max_entries : int, optional
        Check at most this many randomly chosen entries per tensor.

    Returns
    -------
    dict
        Tensor name -> ``max|a - n| / max(max|a|, max|n|)`` over the
        checked entries. Scaling by the tensor's largest gradient keeps the
        measure meaningful for entries whose true gradient is zero, such as
        the key bias, which the softmax ignores.
    """
    _, grads = _loss_and_grads(params, x, target, dropout_seed)
    pick = np.random.default_rng(seed)
    report = {}
    for name, tensor in params.tensors.items():
        flat = tensor.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = pick.choice(flat.size, max_entries, replace=False)
        analytic = grads[name].reshape(-1)[idx]
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            params.bump()
            lp, _ = _loss_and_grads(params, x, target, dropout_seed)
            flat[i] = orig - eps
            params.bump()
            lm, _ = _loss_and_grads(params, x, target, dropout_seed)
            flat[i] = orig
            params.bump()
            numeric[j] = (lp - lm) / (2 * eps)
        scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
        diff = np.abs(analytic - numeric).max(initial=0.0)
        report[name] = float(diff / scale if scale > 0 else diff)
    return report
