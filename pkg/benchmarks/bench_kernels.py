"""Compare the compiled and pure-Python kernel backends.

Run with ``python benchmarks/bench_kernels.py [--repeat N]``. Both backends are
imported directly, so the ``ROOMVOL_PURE_PYTHON`` switch is irrelevant here.
The outputs of the two backends are also compared, so a speedup is never
reported for a kernel that disagrees.
"""

import argparse
import math
import sys
import timeit

import numpy as np
from scipy.signal import get_window

from roomvol import _pykernels, features, room
from roomvol.speech import synthetic_speech

try:
    from roomvol import _kernels
except ImportError:
    _kernels = None


def gammatone_case():
    bank = features.design_gammatone_bank()
    x = np.ascontiguousarray(synthetic_speech(0).samples)
    win = get_window("hann", features.WINDOW).astype(np.float64)
    args = (x, np.ascontiguousarray(bank.poles), np.ascontiguousarray(2.0 * bank.norms),
            win, features.HOP, features.LOG_EPS)
    return "gammatone_analysis (20 bands, 4 s)", lambda k: k.gammatone_analysis(*args)


def images_case(order=30):
    dims = (5.0, 4.6, 4.35)
    alpha, _ = room.alpha_for_target_rt60(math.prod(dims), room.shoebox_surface(dims), 0.5)
    spec = room.RoomSpec(dims, alpha, (1.3, 1.1, 1.4), (3.1, 3.2, 2.7), max_order=order)
    pos, orders = room.image_sources(spec)
    d = np.linalg.norm(pos - np.asarray(spec.mic_pos), axis=1)
    delays = np.ascontiguousarray(spec.fs * d / room.SPEED_OF_SOUND)
    gains = np.ascontiguousarray(math.sqrt(1 - alpha) ** orders / (4 * np.pi * d))
    n = int(delays.max()) + room.SINC_HALF_WIDTH + 2

    def call(k):
        return k.accumulate_images(np.zeros(n), delays, gains, room.SINC_HALF_WIDTH)

    return f"accumulate_images ({delays.size} images)", call


def _max_diff(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return max(float(np.max(np.abs(x - y))) for x, y in zip(a, b))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5, help="timed calls per kernel and backend")
    args = ap.parse_args(argv)
    if _kernels is None:
        print("compiled backend not built; only the Python backend is available", file=sys.stderr)
    backends = [("python", _pykernels)] + ([("cython", _kernels)] if _kernels else [])

    print(f"{'kernel':<40} {'backend':<8} {'best ms':>10} {'speedup':>8} {'max |diff|':>11}")
    for name, call in (gammatone_case(), images_case()):
        ref = call(_pykernels)
        base = None
        for label, mod in backends:
            best = min(timeit.repeat(lambda: call(mod), number=1, repeat=args.repeat))
            base = base or best
            diff = _max_diff(call(mod), ref)
            print(f"{name:<40} {label:<8} {1e3 * best:>10.2f} {base / best:>7.1f}x {diff:>11.2e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
