"""Shoebox room simulation (image-source method) and Sabine utilities."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import AssetError, EstimationError, ParameterError
from .features import SAMPLE_RATE, AudioClip

SPEED_OF_SOUND = 343.0
SABINE_CONSTANT = 0.16
SINC_HALF_WIDTH = 40  # 81-tap fractional delay
ALPHA_MIN = 0.01
ALPHA_MAX = 0.99
WALL_CLEARANCE = 0.5
MIN_SEPARATION = 0.3
MAX_AUTO_ORDER = 60

PROVENANCES = ("simulated", "external")


def sabine_rt60(volume, surface, alpha):
    """Reverberation time ``0.16 V / (alpha S)`` in seconds."""
    if volume <= 0 or surface <= 0:
        raise ParameterError(f"volume and surface must be positive, got {volume}, {surface}")
    if not 0 < alpha <= 1:
        raise ParameterError(f"absorption must lie in (0, 1], got {alpha}")
    return SABINE_CONSTANT * volume / (alpha * surface)


def alpha_for_target_rt60(volume, surface, rt60):
    """Absorption that gives ``rt60`` under Sabine's formula.

    Returns
    -------
    alpha : float
        Clamped to ``[0.01, 0.99]``.
    clamped : bool
        Whether clamping was applied.
    """
    if volume <= 0 or surface <= 0 or rt60 <= 0:
        raise ParameterError(f"inputs must be positive, got V={volume}, S={surface}, T={rt60}")
    alpha = SABINE_CONSTANT * volume / (rt60 * surface)
    clipped = min(max(alpha, ALPHA_MIN), ALPHA_MAX)
    return clipped, clipped != alpha


def shoebox_surface(dims):
    lx, ly, lz = dims
    return 2.0 * (lx * ly + lx * lz + ly * lz)


@dataclass(frozen=True)
class RoomSpec:
    dims: tuple
    absorption: float
    source_pos: tuple
    mic_pos: tuple
    fs: int = SAMPLE_RATE
    max_order: int = 20

    def __post_init__(self):
        dims = tuple(float(d) for d in self.dims)
        src = tuple(float(v) for v in self.source_pos)
        mic = tuple(float(v) for v in self.mic_pos)
        if len(dims) != 3 or len(src) != 3 or len(mic) != 3:
            raise ParameterError("dims, source_pos and mic_pos need three coordinates")
        if min(dims) <= 0:
            raise ParameterError(f"room dimensions must be positive, got {dims}")
        if not 0 < self.absorption <= 1:
            raise ParameterError(f"absorption must lie in (0, 1], got {self.absorption}")
        for name, p in (("source", src), ("mic", mic)):
            if not all(0 < c < d for c, d in zip(p, dims)):
                raise ParameterError(f"{name} position {p} is not strictly inside room {dims}")
        if np.allclose(src, mic, rtol=0, atol=1e-9):
            raise ParameterError("source and microphone coincide")
        if self.max_order < 0:
            raise ParameterError(f"max_order must be >= 0, got {self.max_order}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "source_pos", src)
        object.__setattr__(self, "mic_pos", mic)

    @property
    def volume(self):
        return math.prod(self.dims)

    @property
    def surface(self):
        return shoebox_surface(self.dims)

    @property
    def distance(self):
        return math.dist(self.source_pos, self.mic_pos)


@dataclass(frozen=True)
class RoomMeta:
    volume: float
    surface: float | None
    rt60_nominal: float | None
    provenance: str = "simulated"
    room_id: str | None = None

    def __post_init__(self):
        if not self.volume > 0:
            raise ParameterError(f"volume must be positive, got {self.volume}")
        if self.provenance not in PROVENANCES:
            raise ParameterError(f"unknown provenance {self.provenance!r}")

    @property
    def label_log10_volume(self):
        return math.log10(self.volume)


@dataclass(frozen=True)
class Rir:
    taps: np.ndarray = field(repr=False)
    fs: int
    meta: RoomMeta
    spec: RoomSpec | None = None

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64)
        if taps.ndim != 1 or taps.size == 0:
            raise ParameterError("RIR taps must be a nonempty 1-D array")
        if not np.all(np.isfinite(taps)):
            raise ParameterError("RIR contains non-finite taps")
        object.__setattr__(self, "taps", taps)

    def as_clip(self):
        return AudioClip(self.taps, self.fs)


def _axis_images(n_max, length, coord):
    """Per-axis image offsets: (coordinate, reflection count) for n in [-N, N], q in {0, 1}."""
    n = np.arange(-n_max, n_max + 1)
    coords, counts = [], []
    for q in (0, 1):
        coords.append((1 - 2 * q) * coord + 2 * n * length)
        counts.append(np.abs(n - q) + np.abs(n))
    coords = np.concatenate(coords)
    counts = np.concatenate(counts)
    keep = counts <= n_max
    return coords[keep], counts[keep]


def image_sources(spec):
    """Enumerate image sources up to ``spec.max_order`` reflections.

    Returns
    -------
    positions : ndarray, shape (M, 3)
    orders : ndarray, shape (M,)
        Total reflection count per image.
    """
    n_max = spec.max_order
    ax = [_axis_images(n_max, spec.dims[i], spec.source_pos[i]) for i in range(3)]
    (xc, xo), (yc, yo), (zc, zo) = ax
    xo2, yo2 = np.meshgrid(xo, yo, indexing="ij")
    xc2, yc2 = np.meshgrid(xc, yc, indexing="ij")
    oxy = (xo2 + yo2).ravel()
    keep = oxy <= n_max
    oxy, xc2, yc2 = oxy[keep], xc2.ravel()[keep], yc2.ravel()[keep]
    pos, orders = [], []
    for z, oz in zip(zc, zo):
        sel = oxy + oz <= n_max
        m = int(sel.sum())
        if m == 0:
            continue
        pos.append(np.column_stack([xc2[sel], yc2[sel], np.full(m, z)]))
        orders.append(oxy[sel] + oz)
    return np.concatenate(pos), np.concatenate(orders)


def simulate_shoebox_rir(spec, rir_id=None):
    """Image-source RIR with 81-tap windowed-sinc fractional delays.

    Every image contributes ``beta**order / (4 pi d)`` at delay ``d / c``
    samples, with wall reflection coefficient ``beta = sqrt(1 - alpha)``.
    """
    positions, orders = image_sources(spec)
    d = np.linalg.norm(positions - np.asarray(spec.mic_pos), axis=1)
    beta = math.sqrt(1.0 - spec.absorption)
    if beta == 0.0:
        gains = np.where(orders == 0, 1.0, 0.0) / (4 * np.pi * d)
    else:
        gains = beta ** orders / (4 * np.pi * d)
    delays = spec.fs * d / SPEED_OF_SOUND
    order = np.lexsort((orders, delays))
    delays, gains = delays[order], gains[order]

    rt60 = sabine_rt60(spec.volume, spec.surface, spec.absorption)
    n = int(math.ceil(max(rt60 * spec.fs, delays.max()))) + SINC_HALF_WIDTH + 1
    taps = kernels.accumulate_images(np.zeros(n), np.ascontiguousarray(delays),
                                     np.ascontiguousarray(gains), SINC_HALF_WIDTH)
    meta = RoomMeta(volume=spec.volume, surface=spec.surface, rt60_nominal=rt60,
                    provenance="simulated", room_id=rir_id)
    return Rir(taps=taps, fs=spec.fs, meta=meta, spec=spec)


def energy_decay_curve(taps):
    """Schroeder backward-integrated energy in dB, normalised to 0 dB at t = 0."""
    energy = np.cumsum(np.asarray(taps, dtype=np.float64)[::-1] ** 2)[::-1]
    if energy[0] <= 0:
        raise EstimationError("RIR has no energy")
    with np.errstate(divide="ignore"):
        return 10 * np.log10(energy / energy[0])


def schroeder_rt60(rir, fs=None, start_db=-5.0, stop_db=-25.0):
    """RT60 from a linear fit of the energy decay curve between ``start_db`` and ``stop_db``."""
    if isinstance(rir, Rir):
        taps, fs = rir.taps, rir.fs
    else:
        taps = np.asarray(rir, dtype=np.float64)
        if fs is None:
            raise ParameterError("fs is required for a raw tap array")
    if taps.size == 0:
        raise EstimationError("empty RIR")
    edc = energy_decay_curve(taps)
    finite = np.isfinite(edc)
    if not np.any(finite & (edc <= stop_db)):
        raise EstimationError(f"decay does not reach {stop_db} dB")
    sel = finite & (edc <= start_db) & (edc >= stop_db)
    if sel.sum() < 2:
        raise EstimationError(f"too few samples between {start_db} and {stop_db} dB")
    t = np.flatnonzero(sel) / fs
    slope, _ = np.polyfit(t, edc[sel], 1)
    if slope >= 0:
        raise EstimationError("energy decay curve is not decreasing")
    return -60.0 / slope


def auto_max_order(dims, rt60, cap=MAX_AUTO_ORDER):
    """Reflection order whose path length spans ``rt60`` across the smallest dimension."""
    return int(min(cap, max(1, math.ceil(SPEED_OF_SOUND * rt60 / min(dims)))))


def sample_room(volume_range, rt60_range, rng_seed, fs=SAMPLE_RATE, max_tries=100, max_order=None):
    """Draw a random shoebox room.

    Volume is log-uniform; ``Lx/Lz`` and ``Ly/Lz`` are uniform in [1, 3] so
    every axis pair has an aspect ratio of at most 3. Absorption follows from
    the drawn RT60 via Sabine's formula.
    """
    vmin, vmax = volume_range
    tmin, tmax = rt60_range
    if not 0 < vmin <= vmax or not 0 < tmin <= tmax:
        raise ParameterError(f"invalid ranges: volume {volume_range}, rt60 {rt60_range}")
    rng = np.random.default_rng(rng_seed)
    for _ in range(max_tries):
        volume = float(np.exp(rng.uniform(np.log(vmin), np.log(vmax))))
        rx, ry = rng.uniform(1.0, 3.0, size=2)
        lz = (volume / (rx * ry)) ** (1.0 / 3.0)
        dims = (rx * lz, ry * lz, lz)
        rt60 = float(rng.uniform(tmin, tmax))
        if min(dims) <= 2 * WALL_CLEARANCE:
            continue
        lo = np.full(3, WALL_CLEARANCE)
        hi = np.asarray(dims) - WALL_CLEARANCE
        src = rng.uniform(lo, hi)
        mic = rng.uniform(lo, hi)
        if np.linalg.norm(src - mic) < MIN_SEPARATION:
            continue
        alpha, _ = alpha_for_target_rt60(volume, shoebox_surface(dims), rt60)
        order = max_order if max_order is not None else auto_max_order(dims, rt60)
        return RoomSpec(dims=dims, absorption=alpha, source_pos=tuple(src), mic_pos=tuple(mic),
                        fs=fs, max_order=order)
    raise ParameterError(f"no feasible room after {max_tries} draws for volume range {volume_range}")


# ---------------------------------------------------------------------------
# RIR store: <id>.wav + <id>.json
# ---------------------------------------------------------------------------


def rir_record(rir_id, rir):
    spec = rir.spec
    return {
        "id": rir_id,
        "volume_m3": rir.meta.volume,
        "surface_m2": rir.meta.surface,
        "rt60_nominal_s": rir.meta.rt60_nominal,
        "provenance": rir.meta.provenance,
        "source_pos": list(spec.source_pos) if spec else None,
        "mic_pos": list(spec.mic_pos) if spec else None,
        "dims": list(spec.dims) if spec else None,
        "room_id": rir.meta.room_id or rir_id,
        "absorption": spec.absorption if spec else None,
        "max_order": spec.max_order if spec else None,
    }


def write_rir(store_dir, rir_id, rir):
    """Write ``<id>.wav`` (float32 mono) and its ``<id>.json`` sidecar.

    Returns the sidecar record with ``_dir`` set, as :func:`list_rir_records` would.
    """
    from .wavio import write_wav

    store = Path(store_dir)
    store.mkdir(parents=True, exist_ok=True)
    write_wav(store / f"{rir_id}.wav", rir.as_clip())
    record = rir_record(rir_id, rir)
    (store / f"{rir_id}.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return {**record, "_dir": str(store)}


def list_rir_records(store_dirs):
    """All sidecar records in one or more store directories, sorted by id."""
    if isinstance(store_dirs, (str, Path)):
        store_dirs = [store_dirs]
    records = []
    for d in store_dirs:
        d = Path(d)
        if not d.is_dir():
            raise AssetError(f"RIR store {d} does not exist")
        for p in sorted(d.glob("*.json")):
            rec = json.loads(p.read_text())
            rec.setdefault("room_id", rec["id"])
            rec["_dir"] = str(d)
            records.append(rec)
    ids = [r["id"] for r in records]
    if len(set(ids)) != len(ids):
        raise ParameterError("duplicate RIR ids across stores")
    return sorted(records, key=lambda r: r["id"])


def read_rir(record):
    """Load the taps for a sidecar record returned by :func:`list_rir_records`."""
    from .wavio import read_wav

    clip = read_wav(Path(record["_dir"]) / f"{record['id']}.wav")
    meta = RoomMeta(volume=record["volume_m3"], surface=record.get("surface_m2"),
                    rt60_nominal=record.get("rt60_nominal_s"),
                    provenance=record.get("provenance", "external"),
                    room_id=record.get("room_id"))
    return Rir(taps=clip.samples, fs=clip.sample_rate, meta=meta)
