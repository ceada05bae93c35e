import json
import math

import numpy as np
import pytest

from roomvol import _pykernels, kernels, room
from roomvol.errors import EstimationError, ParameterError
from roomvol.room import RoomSpec


def cubeish_spec(order, alpha=None, rt60=0.5):
    dims = (5.0, 4.6, 4.35)
    v, s = math.prod(dims), room.shoebox_surface(dims)
    if alpha is None:
        alpha, _ = room.alpha_for_target_rt60(v, s, rt60)
    return RoomSpec(dims, alpha, (1.3, 1.1, 1.4), (3.1, 3.2, 2.7), max_order=order)


class TestSabine:
    def test_cancellation(self):
        assert room.sabine_rt60(50.0, 0.16 * 50.0 / 0.4, 0.4) == pytest.approx(1.0, rel=1e-15)

    @pytest.mark.parametrize("v,s,a,expected", [(100, 130, 0.16, 0.769230769230769231),
                                                (1000, 700, 0.3, 0.761904761904761905)])
    def test_values(self, v, s, a, expected):
        assert room.sabine_rt60(v, s, a) == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("args", [(0, 1, 0.5), (1, -1, 0.5), (1, 1, 0.0), (1, 1, 1.2)])
    def test_invalid(self, args):
        with pytest.raises(ParameterError):
            room.sabine_rt60(*args)

    @pytest.mark.parametrize("alpha", [0.05, 0.2, 0.6, 0.95])
    def test_inverse(self, alpha):
        t = room.sabine_rt60(240.0, 250.0, alpha)
        a, clamped = room.alpha_for_target_rt60(240.0, 250.0, t)
        assert a == pytest.approx(alpha, rel=1e-12) and not clamped

    def test_inverse_example(self):
        a, _ = room.alpha_for_target_rt60(100, 130, 0.7692)
        assert a == pytest.approx(0.16, abs=1e-4)

    def test_clamp(self):
        a, clamped = room.alpha_for_target_rt60(100, 130, 0.01)
        assert a == 0.99 and clamped


class TestRoomSpec:
    @pytest.mark.parametrize("kw", [
        {"dims": (0, 3, 3)},
        {"source_pos": (5, 1, 1)},
        {"mic_pos": (1, 1, 1), "source_pos": (1, 1, 1)},
        {"absorption": 0.0},
    ])
    def test_invalid(self, kw):
        base = dict(dims=(4, 3, 3), absorption=0.3, source_pos=(1, 1, 1), mic_pos=(2, 2, 2))
        base.update(kw)
        with pytest.raises(ParameterError):
            RoomSpec(**base)


class TestImageSources:
    def test_first_order_has_seven_arrivals(self):
        # asymmetric placement keeps all seven arrivals >= 14 samples apart
        spec = RoomSpec((7.1, 5.3, 3.9), 0.3, (1.0, 1.4, 1.1), (2.1, 1.9, 1.5), max_order=1)
        pos, orders = room.image_sources(spec)
        assert len(orders) == 7
        assert sorted(orders.tolist()) == [0, 1, 1, 1, 1, 1, 1]
        taps = room.simulate_shoebox_rir(spec).taps
        # seven well separated arrivals show up as seven local maxima of |h|
        a = np.abs(taps)
        peaks = [i for i in range(1, len(a) - 1)
                 if a[i] > a[i - 1] and a[i] >= a[i + 1] and a[i] > 0.05 * a.max()]
        d = np.linalg.norm(pos - np.array(spec.mic_pos), axis=1) * 16000 / 343
        assert peaks == sorted(np.round(d).astype(int).tolist())

    def test_image_count_against_brute_force(self):
        spec = cubeish_spec(order=4)
        _, orders = room.image_sources(spec)
        n = 0
        for nx in range(-4, 5):
            for ny in range(-4, 5):
                for nz in range(-4, 5):
                    for q in np.ndindex(2, 2, 2):
                        o = sum(abs(nn - qq) + abs(nn) for nn, qq in zip((nx, ny, nz), q))
                        n += o <= 4
        assert len(orders) == n

    def test_direct_path_delay(self):
        # d = 1.7 m -> 79.3 samples; the arrival peaks at sample 79
        spec = RoomSpec((6, 5, 4), 0.3, (1.0, 2.0, 2.0), (2.7, 2.0, 2.0), max_order=0)
        rir = room.simulate_shoebox_rir(spec)
        assert int(np.argmax(np.abs(rir.taps))) == round(16000 * 1.7 / 343) == 79

    def test_integer_delay_gives_single_tap(self):
        d = 343.0 * 100 / 16000  # exactly 100 samples
        spec = RoomSpec((6, 5, 4), 0.3, (1.0, 2.0, 2.0), (1.0 + d, 2.0, 2.0), max_order=0)
        taps = room.simulate_shoebox_rir(spec).taps
        nz = np.flatnonzero(taps)
        assert nz.tolist() == [100]
        assert taps[100] == pytest.approx(1 / (4 * np.pi * d))

    def test_full_absorption_is_direct_only(self):
        spec = RoomSpec((6, 5, 4), 1.0, (1.0, 2.0, 2.0), (2.7, 2.0, 2.0), max_order=3)
        direct = room.simulate_shoebox_rir(spec.__class__(**{**spec.__dict__, "max_order": 0}))
        full = room.simulate_shoebox_rir(spec)
        n = len(direct.taps)
        np.testing.assert_allclose(full.taps[:n], direct.taps, atol=1e-15)
        assert np.all(full.taps[n:] == 0)

    def test_meta_and_length(self):
        spec = cubeish_spec(order=3)
        rir = room.simulate_shoebox_rir(spec)
        assert rir.meta.volume == pytest.approx(math.prod(spec.dims))
        assert rir.meta.label_log10_volume == pytest.approx(math.log10(rir.meta.volume))
        assert len(rir.taps) >= rir.meta.rt60_nominal * 16000

    def test_deterministic(self):
        spec = cubeish_spec(order=6)
        assert np.array_equal(room.simulate_shoebox_rir(spec).taps,
                              room.simulate_shoebox_rir(spec).taps)

    def test_backends_agree(self):
        rng = np.random.default_rng(0)
        delays = np.concatenate([rng.uniform(-10, 500, 300), [37.0, 200.0]])
        gains = rng.standard_normal(302)
        a = _pykernels.accumulate_images(np.zeros(520), delays, gains, 40)
        b = kernels.accumulate_images(np.zeros(520), delays, gains, 40)
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestSchroeder:
    def test_exponential_decay(self):
        fs, t60 = 16000, 0.5
        t = np.arange(int(1.0 * fs)) / fs
        assert room.schroeder_rt60(np.exp(-6.91 * t / t60), fs) == pytest.approx(t60, rel=0.05)

    def test_noise_decay(self):
        fs, t60 = 16000, 0.8
        t = np.arange(int(1.5 * fs)) / fs
        h = np.random.default_rng(1).standard_normal(t.size) * np.exp(-6.91 * t / t60)
        assert room.schroeder_rt60(h, fs) == pytest.approx(t60, rel=0.05)

    def test_pure_impulse(self):
        h = np.zeros(1000)
        h[0] = 1.0
        with pytest.raises(EstimationError):
            room.schroeder_rt60(h, 16000)

    @pytest.mark.parametrize("order", [20, 25, 30, 40])
    def test_simulated_room_matches_sabine(self, order):
        spec = cubeish_spec(order)
        nominal = room.sabine_rt60(spec.volume, spec.surface, spec.absorption)
        measured = room.schroeder_rt60(room.simulate_shoebox_rir(spec))
        assert 0.7 * nominal <= measured <= 1.3 * nominal


class TestSampleRoom:
    def test_deterministic(self):
        assert room.sample_room((12, 21000), (0.3, 1.2), 7) == room.sample_room((12, 21000), (0.3, 1.2), 7)

    def test_ranges_and_construction(self):
        for seed in range(40):
            spec = room.sample_room((12, 21000), (0.3, 1.2), seed)
            assert 12 <= spec.volume <= 21000
            d = sorted(spec.dims)
            assert d[2] / d[0] <= 3.0 + 1e-9
            assert min(spec.source_pos) >= 0.5 and min(spec.mic_pos) >= 0.5
            assert all(spec.dims[i] - spec.source_pos[i] >= 0.5 for i in range(3))
            assert spec.distance >= 0.3
            assert 0.01 <= spec.absorption <= 0.99

    def test_volume_equals_draw(self):
        rng_volume = np.exp(np.random.default_rng(3).uniform(np.log(50), np.log(500)))
        spec = room.sample_room((50, 500), (0.4, 0.6), 3)
        assert spec.volume == pytest.approx(rng_volume, rel=1e-6)

    def test_infeasible(self):
        with pytest.raises(ParameterError):
            room.sample_room((0.5, 0.6), (0.3, 0.4), 0, max_tries=5)


class TestRirStore:
    def test_round_trip(self, tmp_path):
        spec = cubeish_spec(order=2)
        rir = room.simulate_shoebox_rir(spec)
        rec = room.write_rir(tmp_path, "sim0000", rir)
        side = json.loads((tmp_path / "sim0000.json").read_text())
        for key in ("id", "volume_m3", "surface_m2", "rt60_nominal_s", "provenance",
                    "source_pos", "mic_pos", "dims"):
            assert key in side
        assert side == {k: v for k, v in rec.items() if k != "_dir"}
        [listed] = room.list_rir_records(tmp_path)
        back = room.read_rir(listed)
        np.testing.assert_array_equal(back.taps, rir.taps.astype(np.float32))
        assert back.meta.provenance == "simulated"
