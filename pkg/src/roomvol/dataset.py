"""Dataset construction: reverberation, noise mixing, splits, augmentation, features."""

from __future__ import annotations

import csv
import json
import zlib
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from . import features
from .augment import AugmentParams, specaugment
from .errors import AssetError, ConfigurationError, DataFormatError, ParameterError, RoomVolError
from .features import CLIP_SAMPLES, AudioClip, standardize_length
from .speech import synthetic_speech

SNR_LEVELS = (30, 20, 10, 0)
NOISE_KINDS = ("white", "babble", "none")
SPLITS = ("train", "validation", "test")
PEAK_LEVEL = 0.9
BABBLE_TALKERS = 6

# record counts per dataset profile; "full" mirrors the published split sizes
PROFILES = {
    "desk": {"n_records": 48, "augment_fraction": 0.25, "n_speech": 4},
    "full": {"n_records": 32000, "augment_fraction": 0.25, "n_speech": 100},
}


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "none"
    snr_db: float | None = None

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ParameterError(f"unknown noise kind {self.kind!r}")
        if (self.kind == "none") != (self.snr_db is None):
            raise ParameterError("snr_db must be given exactly when kind is not 'none'")

    @property
    def tag(self):
        return "none" if self.kind == "none" else f"{self.kind}{int(self.snr_db):+d}"

    def to_json(self):
        return {"kind": self.kind, "snr_db": self.snr_db}


def default_noise_grid():
    return [NoiseSpec(k, s) for k in ("white", "babble") for s in SNR_LEVELS]


@dataclass(frozen=True)
class ManifestRecord:
    utterance_id: str
    rir_id: str
    noise: NoiseSpec
    augmented: bool
    split: str
    label_log10_volume: float

    @property
    def id(self):
        suffix = "__aug" if self.augmented else ""
        return f"{self.utterance_id}__{self.rir_id}__{self.noise.tag}{suffix}"

    @property
    def seed(self):
        """Stable per-record seed for noise and augmentation draws."""
        return zlib.crc32(self.id.encode())

    def to_json(self):
        return {"utterance_id": self.utterance_id, "rir_id": self.rir_id,
                "noise": self.noise.to_json(), "augmented": self.augmented,
                "split": self.split, "label_log10_volume": self.label_log10_volume}

    @classmethod
    def from_json(cls, obj):
        try:
            noise = NoiseSpec(obj["noise"]["kind"], obj["noise"]["snr_db"])
            return cls(obj["utterance_id"], obj["rir_id"], noise, bool(obj["augmented"]),
                       obj["split"], float(obj["label_log10_volume"]))
        except (KeyError, TypeError) as exc:
            raise DataFormatError(f"malformed manifest record {obj!r}") from exc


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple

    def split(self, name):
        return [r for r in self.records if r.split == name]

    def counts(self):
        return {s: sum(1 for r in self.records if r.split == s) for s in SPLITS}

    def to_json(self):
        return [r.to_json() for r in self.records]

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path):
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise AssetError(f"missing manifest {path}") from exc
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}: {exc}") from exc
        if not isinstance(data, list):
            raise DataFormatError(f"{path}: manifest must be a JSON array")
        return cls(tuple(ManifestRecord.from_json(o) for o in data))


# ---------------------------------------------------------------------------
# Signal operations
# ---------------------------------------------------------------------------


def convolve_speech(clip, rir_taps, rir_fs=None):
    """Reverberate ``clip``: full convolution, cut to 4 s, peak-normalised to 0.9."""
    taps = getattr(rir_taps, "taps", rir_taps)
    fs = getattr(rir_taps, "fs", rir_fs)
    if fs is not None and fs != clip.sample_rate:
        raise ParameterError(f"sample rates differ: speech {clip.sample_rate}, RIR {fs}")
    y = fftconvolve(clip.samples, np.asarray(taps, dtype=np.float64))[:CLIP_SAMPLES]
    if y.shape[0] < CLIP_SAMPLES:
        y = np.pad(y, (0, CLIP_SAMPLES - y.shape[0]))
    peak = np.abs(y).max()
    if peak > 0:
        y = y * (PEAK_LEVEL / peak)
    return AudioClip(y, clip.sample_rate)


def signal_power(x):
    return float(np.mean(np.asarray(x, dtype=np.float64) ** 2))


def babble_noise(n_samples, rng, pool=None, n_talkers=BABBLE_TALKERS, fs=features.SAMPLE_RATE):
    """Sum of ``n_talkers`` circularly shifted, unit-power clean clips."""
    out = np.zeros(n_samples)
    for _ in range(n_talkers):
        if pool:
            src = pool[int(rng.integers(len(pool)))]
            src = standardize_length(src, n_samples).samples
        else:
            src = synthetic_speech(int(rng.integers(2 ** 31)), n_samples, fs).samples
        p = signal_power(src)
        if p > 0:
            out += np.roll(src / np.sqrt(p), int(rng.integers(n_samples)))
    return out


def scaled_noise(clip, spec, rng_seed, babble_pool=None):
    """Noise addend whose power is exactly ``P_signal / 10**(snr/10)``."""
    n = len(clip)
    if spec.kind == "none":
        return np.zeros(n)
    p_sig = signal_power(clip.samples)
    if p_sig <= 0:
        raise ParameterError("cannot mix noise into a zero-power clip")
    rng = np.random.default_rng(rng_seed)
    if spec.kind == "white":
        noise = rng.standard_normal(n)
    else:
        noise = babble_noise(n, rng, babble_pool, fs=clip.sample_rate)
    return noise * np.sqrt(p_sig / (signal_power(noise) * 10.0 ** (spec.snr_db / 10.0)))


def mix_noise(clip, spec, rng_seed, babble_pool=None):
    """``clip + scaled_noise(...)``, nothing else."""
    if spec.kind != "none" and signal_power(clip.samples) <= 0:
        raise ParameterError("cannot mix noise into a zero-power clip")
    return AudioClip(clip.samples + scaled_noise(clip, spec, rng_seed, babble_pool),
                     clip.sample_rate)


# ---------------------------------------------------------------------------
# Manifest construction
# ---------------------------------------------------------------------------


def split_targets(n, ratio):
    """Largest-remainder allocation of ``n`` items to ``ratio`` parts."""
    ratio = np.asarray(ratio, dtype=np.float64)
    if np.any(ratio < 0) or ratio.sum() <= 0:
        raise ParameterError(f"invalid split ratio {ratio}")
    exact = n * ratio / ratio.sum()
    counts = np.floor(exact).astype(int)
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[: n - counts.sum()]] += 1
    return [int(c) for c in counts]


def build_manifest(speech_ids, rir_records, noise_grid=None, split_ratio=(6, 2, 2), rng_seed=0,
                   n_records=None, n_augmented=0, allow_simulated_test=False):
    """Assign speech x RIR x noise combinations to room-disjoint splits.

    Parameters
    ----------
    speech_ids : sequence of str
    rir_records : sequence of dict
        RIR sidecar records with at least ``id``, ``volume_m3`` and
        ``provenance``; ``room_id`` defaults to ``id``.
    noise_grid : sequence of NoiseSpec, optional
        Defaults to white and babble noise at +30, +20, +10 and 0 dB.
    split_ratio : (train, validation, test)
    n_records : int, optional
        Size of the non-augmented dataset; defaults to every combination.
    n_augmented : int
        Extra train records built from noise-free reverberant speech and
        marked ``augmented``.
    allow_simulated_test : bool
        Permit simulated rooms in the test split when no external RIRs exist.

    Returns
    -------
    DatasetManifest
    """
    speech_ids = sorted(set(speech_ids))
    noise_grid = list(noise_grid) if noise_grid is not None else default_noise_grid()
    if not speech_ids or not rir_records or not noise_grid:
        raise ParameterError("speech ids, RIR records and noise grid must be nonempty")
    rng = np.random.default_rng(rng_seed)

    rooms = defaultdict(list)
    for rec in sorted(rir_records, key=lambda r: r["id"]):
        rooms[rec.get("room_id") or rec["id"]].append(rec)
    room_ids = sorted(rooms)
    room_ids = [room_ids[i] for i in rng.permutation(len(room_ids))]
    external = [r for r in room_ids if rooms[r][0].get("provenance") == "external"]

    per_rir = len(speech_ids) * len(noise_grid)
    capacity = {r: per_rir * len(rooms[r]) for r in room_ids}
    total = sum(capacity.values())
    n_records = total if n_records is None else int(n_records)
    if not 0 < n_records <= total:
        raise ConfigurationError(f"requested {n_records} records but only {total} combinations exist")
    targets = dict(zip(SPLITS, split_targets(n_records, split_ratio)))

    if external:
        test_pool = external
    elif allow_simulated_test:
        test_pool = room_ids
    else:
        raise ConfigurationError("no external RIRs available for the test split")

    # rooms are split in the same proportions as records, one room minimum each
    if len(room_ids) < 3:
        raise ConfigurationError(f"need at least 3 rooms for disjoint splits, got {len(room_ids)}")
    n_train_rooms, n_val_rooms, n_test_rooms = (max(1, k) for k in split_targets(len(room_ids), split_ratio))
    n_test_rooms = min(n_test_rooms, len(test_pool), len(room_ids) - 2)
    assigned = {r: "test" for r in test_pool[:n_test_rooms]}
    rest = [r for r in room_ids if r not in assigned]
    n_val_rooms = min(n_val_rooms, len(rest) - 1)
    assigned.update({r: "validation" for r in rest[:n_val_rooms]})
    assigned.update({r: "train" for r in rest[n_val_rooms:]})
    for split in SPLITS:
        cap = sum(capacity[r] for r in room_ids if assigned[r] == split)
        if cap < targets[split]:
            raise ConfigurationError(
                f"not enough rooms for {targets[split]} {split} records (capacity {cap})")

    records = []
    for split in SPLITS:
        rirs = [rec for r in room_ids if assigned[r] == split for rec in rooms[r]]
        combos = [(s, rec, nz) for rec in rirs for s in speech_ids for nz in noise_grid]
        pick = rng.permutation(len(combos))[: targets[split]]
        for i in sorted(pick):
            s, rec, nz = combos[i]
            records.append(ManifestRecord(s, rec["id"], nz, False, split,
                                          float(np.log10(rec["volume_m3"]))))

    if n_augmented:
        train_rirs = [rec for r in room_ids if assigned[r] == "train" for rec in rooms[r]]
        combos = [(s, rec) for rec in train_rirs for s in speech_ids]
        if n_augmented > len(combos):
            raise ConfigurationError(
                f"requested {n_augmented} augmented records from {len(combos)} clean train pairs")
        for i in sorted(rng.permutation(len(combos))[:n_augmented]):
            s, rec = combos[i]
            records.append(ManifestRecord(s, rec["id"], NoiseSpec(), True, "train",
                                          float(np.log10(rec["volume_m3"]))))
    return DatasetManifest(tuple(records))


def profile_manifest(profile, speech_ids, rir_records, dataset="I", rng_seed=0,
                     allow_simulated_test=False):
    """Manifest sized by a named profile; Dataset II adds augmented train records."""
    if profile not in PROFILES:
        raise ParameterError(f"unknown profile {profile!r}")
    if dataset not in ("I", "II"):
        raise ParameterError(f"dataset must be 'I' or 'II', got {dataset!r}")
    cfg = PROFILES[profile]
    n_train = split_targets(cfg["n_records"], (6, 2, 2))[0]
    n_aug = int(round(cfg["augment_fraction"] * n_train)) if dataset == "II" else 0
    return build_manifest(speech_ids, rir_records, rng_seed=rng_seed, n_records=cfg["n_records"],
                          n_augmented=n_aug, allow_simulated_test=allow_simulated_test)


# ---------------------------------------------------------------------------
# Rendering audio and features
# ---------------------------------------------------------------------------


class SpeechSource:
    """Clean utterances by id, either synthetic or from a directory of 16 kHz WAVs."""

    def __init__(self, directory=None, n_synthetic=4):
        self.directory = Path(directory) if directory else None
        if self.directory is not None:
            if not self.directory.is_dir():
                raise AssetError(f"speech directory {directory} does not exist")
            self.ids = sorted(p.stem for p in self.directory.glob("*.wav"))
            if not self.ids:
                raise AssetError(f"no WAV files in {directory}")
        else:
            self.ids = [f"syn{i:04d}" for i in range(n_synthetic)]
        self._cache = {}

    def __call__(self, utterance_id):
        if utterance_id not in self._cache:
            if self.directory is None:
                if not utterance_id.startswith("syn"):
                    raise AssetError(f"unknown synthetic utterance {utterance_id!r}")
                clip = synthetic_speech(int(utterance_id[3:]))
            else:
                from .wavio import read_wav

                clip = read_wav(self.directory / f"{utterance_id}.wav", features.SAMPLE_RATE)
            self._cache[utterance_id] = standardize_length(clip)
        return self._cache[utterance_id]

    def pool(self):
        return [self(i) for i in self.ids]


def render_record(record, speech, rir, augment_params=None, babble_pool=None):
    """Produce the final 4 s waveform for one manifest record."""
    wet = convolve_speech(speech, rir)
    if record.augmented:
        params = augment_params or AugmentParams()
        return specaugment(wet, params.replace(rng_seed=record.seed))
    return mix_noise(wet, record.noise, record.seed, babble_pool)


def render_dataset(manifest, speech_source, rir_records, out_dir, augment_params=None):
    """Write ``<record id>.wav`` per record; returns a list of per-record errors."""
    from .room import read_rir
    from .wavio import write_wav

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_id = {r["id"]: r for r in rir_records}
    pool = speech_source.pool()
    rir_cache, errors = {}, []
    for rec in manifest.records:
        try:
            if rec.rir_id not in by_id:
                raise AssetError(f"unknown RIR {rec.rir_id}")
            if rec.rir_id not in rir_cache:
                rir_cache[rec.rir_id] = read_rir(by_id[rec.rir_id])
            clip = render_record(rec, speech_source(rec.utterance_id), rir_cache[rec.rir_id],
                                 augment_params, pool)
            write_wav(out / f"{rec.id}.wav", clip)
        except RoomVolError as exc:
            errors.append({"id": rec.id, "error": str(exc), "exit_code": exc.exit_code})
    return errors


INDEX_HEADER = ["id", "path", "label_log10_volume", "split"]


def featurize_dataset(manifest, audio_dir, out_dir, bank=None):
    """One RVFB file per record plus ``index.csv``.

    Missing or unreadable audio is reported per record and skipped.

    Returns
    -------
    rows : list of dict
        Index rows written.
    errors : list of dict
    """
    from .wavio import read_wav

    bank = bank or features.design_gammatone_bank()
    audio_dir, out = Path(audio_dir), Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, errors = [], []
    for rec in manifest.records:
        try:
            clip = read_wav(audio_dir / f"{rec.id}.wav", features.SAMPLE_RATE)
            block = features.featurize_clip(clip, bank)
            name = f"{rec.id}.rvfb"
            features.write_rvfb(out / name, block)
            rows.append({"id": rec.id, "path": name,
                         "label_log10_volume": repr(rec.label_log10_volume), "split": rec.split})
        except RoomVolError as exc:
            errors.append({"id": rec.id, "error": str(exc), "exit_code": exc.exit_code})
    with open(out / "index.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=INDEX_HEADER)
        writer.writeheader()
        writer.writerows(rows)
    return rows, errors


def read_feature_index(index_path):
    """Index rows with absolute paths and float labels."""
    index_path = Path(index_path)
    if index_path.is_dir():
        index_path = index_path / "index.csv"
    try:
        with open(index_path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != INDEX_HEADER:
                raise DataFormatError(f"{index_path}: header must be {','.join(INDEX_HEADER)}")
            rows = list(reader)
    except FileNotFoundError as exc:
        raise AssetError(f"missing feature index {index_path}") from exc
    for row in rows:
        row["path"] = str(index_path.parent / row["path"])
        row["label_log10_volume"] = float(row["label_log10_volume"])
    return rows


def load_split(rows, split):
    """Stack the feature blocks of one split: (ids, X of shape (N, F, T), labels)."""
    sel = [r for r in rows if r["split"] == split]
    if not sel:
        return [], np.zeros((0, features.N_FEATURES, features.N_FRAMES)), np.zeros(0)
    x = np.stack([features.read_rvfb(r["path"]) for r in sel]).astype(np.float64)
    y = np.array([r["label_log10_volume"] for r in sel])
    return [r["id"] for r in sel], x, y
