import time

import numpy as np
import pytest

from roomvol import dataset, features, model, room, train, wavio
from roomvol.room import RoomMeta, Rir
from roomvol.speech import synthetic_speech

# filled by tests/test_acceptance.py, printed at the end of the run
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, ok, elapsed, detail in sorted(ACCEPTANCE_RESULTS):
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{status}] {number:>2}. {name} ({elapsed:.2f} s){detail}")


def make_external_store(store, volumes=(150.0, 600.0, 2500.0, 9000.0), seed=0):
    """Decaying-noise RIRs tagged as externally measured, one per volume."""
    rng = np.random.default_rng(seed)
    records = []
    for i, v in enumerate(volumes):
        rt60 = 0.3 + 0.1 * i
        t = np.arange(int(rt60 * 16000)) / 16000
        taps = 0.05 * rng.standard_normal(t.size) * np.exp(-6.91 * t / rt60)
        taps[0] = 1.0
        meta = RoomMeta(volume=v, surface=None, rt60_nominal=rt60, provenance="external")
        records.append(room.write_rir(store, f"ext{i:04d}", Rir(taps, 16000, meta)))
    return records


@pytest.fixture(scope="session")
def external_store(tmp_path_factory):
    store = tmp_path_factory.mktemp("external_rirs")
    make_external_store(store)
    return store


OVERFIT_CONFIG = train.TrainConfig(epochs_max=500, batch_size=8, learning_rate=1e-3,
                                   weight_decay=0.0, plateau_patience=20, early_stop_patience=50,
                                   rng_seed=0, stop_below=1e-4)
OVERFIT_MODEL = model.PROFILES["desk"].replace(dropout=0.0)


def overfit_records(directory):
    """Eight reverberant synthetic-speech clips in distinct simulated rooms, as WAV files."""
    bank = features.design_gammatone_bank()
    blocks, labels, paths = [], [], []
    for i in range(8):
        spec = room.sample_room((20.0, 8000.0), (0.3, 0.8), 1000 + i, max_order=12)
        rir = room.simulate_shoebox_rir(spec)
        clip = dataset.convolve_speech(synthetic_speech(i), rir)
        path = directory / f"clip{i}.wav"
        wavio.write_wav(path, clip)
        block = features.featurize_clip(wavio.read_wav(path, 16000), bank)
        blocks.append(block.data.astype(np.float32).astype(np.float64))
        labels.append(rir.meta.label_log10_volume)
        paths.append(path)
    return np.stack(blocks), np.array(labels), paths


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    """Two identical overfitting runs of the desk model on eight records."""
    d = tmp_path_factory.mktemp("overfit")
    x, y, paths = overfit_records(d)
    t0 = time.perf_counter()
    runs = []
    for _ in range(2):
        best, hist = train.train((x, y), (x, y), OVERFIT_CONFIG, model.init_params(OVERFIT_MODEL, 0))
        runs.append((best, hist))
    elapsed = (time.perf_counter() - t0) / 2
    return {"x": x, "y": y, "paths": paths, "runs": runs, "seconds_per_run": elapsed, "dir": d}
