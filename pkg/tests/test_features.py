import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from roomvol import _pykernels, features, kernels
from roomvol.errors import DataFormatError, ParameterError
from roomvol.features import AudioClip


@pytest.fixture(scope="module")
def bank():
    return features.design_gammatone_bank()


def tone(freq, n=features.CLIP_SAMPLES, amp=0.5, fs=features.SAMPLE_RATE):
    return AudioClip(amp * np.sin(2 * np.pi * freq * np.arange(n) / fs), fs)


class TestErbSpacing:
    def test_two_bands_are_the_endpoints(self):
        np.testing.assert_array_equal(features.erb_center_frequencies(2, 50, 2000), [50, 2000])

    def test_twenty_bands_monotone(self):
        cf = features.erb_center_frequencies(20, 50, 2000)
        assert cf[0] == 50 and cf[-1] == 2000
        assert np.all(np.diff(cf) > 0)

    def test_three_band_midpoint(self):
        # inverse ERB-number of the mean ERB-number of 50 and 2000 Hz (mpmath, 30 digits)
        cf = features.erb_center_frequencies(3, 50, 2000)
        assert cf[1] == pytest.approx(559.502047521081833, rel=1e-12)

    @pytest.mark.parametrize("args", [(1, 50, 2000), (5, 0, 2000), (5, 2000, 50), (5, 50, 9000)])
    def test_invalid_ranges(self, args):
        with pytest.raises(ParameterError):
            features.erb_center_frequencies(*args)


class TestGammatoneBank:
    def test_band_count_and_range(self, bank):
        assert bank.n_bands == 20
        assert bank.center_freqs[0] == 50 and bank.center_freqs[-1] == 2000

    def test_peak_at_center_with_unit_gain(self, bank):
        for k, fc in enumerate(bank.center_freqs):
            f = np.linspace(0.9 * fc, 1.1 * fc, 20001)
            mag = np.abs(bank.response(f)[k])
            assert abs(f[np.argmax(mag)] - fc) / fc < 0.01
            assert abs(np.abs(bank.response([fc])[k, 0]) - 1.0) < 1e-12

    @pytest.mark.parametrize("k", [0, 7, 19])
    def test_tone_at_center_passes_with_unit_amplitude(self, bank, k):
        x = tone(bank.center_freqs[k], n=32000, amp=1.0)
        z = bank.filter(x.samples)[k, 16000:]
        assert np.mean(np.abs(z)) == pytest.approx(1.0, abs=0.01)

    def test_2khz_tone_rejected_by_lowest_band(self, bank):
        x = tone(2000.0, n=32000, amp=1.0).samples
        z = bank.filter(x)[0, 16000:]
        assert np.sqrt(np.mean(z.real ** 2)) < 0.01 * np.sqrt(np.mean(x ** 2))


class TestAnalyzeClip:
    def test_frame_count(self, bank):
        mag, phase = features.analyze_clip(tone(300.0), bank)
        assert mag.shape == phase.shape == (20, 1999)

    def test_silence(self, bank):
        mag, phase = features.analyze_clip(AudioClip(np.zeros(4000)), bank)
        assert np.all(mag == np.log(features.LOG_EPS))
        assert np.all(phase == 0.0)

    def test_short_clip_rejected(self, bank):
        with pytest.raises(ParameterError):
            features.analyze_clip(AudioClip(np.zeros(63)), bank)

    @pytest.mark.parametrize("k", [2, 9, 16])
    def test_tone_maximises_its_own_band(self, bank, k):
        mag, _ = features.analyze_clip(tone(bank.center_freqs[k]), bank)
        means = mag[:, 100:].mean(axis=1)
        assert int(np.argmax(means)) == k
        if k < 18:
            assert means[k] > means[k + 2]
        if k >= 2:
            assert means[k] > means[k - 2]

    def test_gain_shifts_log_magnitude_and_keeps_phase(self, bank):
        rng = np.random.default_rng(3)
        x = 0.05 * rng.standard_normal(8000)
        m1, p1 = features.analyze_clip(AudioClip(x), bank)
        m2, p2 = features.analyze_clip(AudioClip(3.0 * x), bank)
        np.testing.assert_allclose(m2 - m1, np.log(3.0), atol=1e-5)
        np.testing.assert_allclose(features.wrap_phase(p2 - p1), 0.0, atol=1e-9)

    def test_deterministic(self, bank):
        x = AudioClip(np.random.default_rng(0).standard_normal(6000))
        a = features.analyze_clip(x, bank)
        b = features.analyze_clip(x, bank)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_backends_agree(self, bank):
        x = np.random.default_rng(1).standard_normal(5000)
        win = np.hanning(64)
        ref = _pykernels.gammatone_analysis(x, bank.poles, 2 * bank.norms, win, 32, 1e-10)
        got = kernels.gammatone_analysis(x, bank.poles, 2 * bank.norms, win, 32, 1e-10)
        np.testing.assert_allclose(got[0], ref[0], atol=1e-10)
        np.testing.assert_allclose(features.wrap_phase(got[1] - ref[1]), 0.0, atol=1e-9)


class TestPhaseFeatures:
    def test_constant_phase(self):
        low, d = features.phase_features(np.full((20, 7), 1.3))
        assert low.shape == d.shape == (5, 7)
        assert np.all(d == 0.0)

    def test_linear_ramp(self):
        ph = np.repeat((np.arange(20) * 0.1)[:, None], 4, axis=1)
        _, d = features.phase_features(ph)
        np.testing.assert_allclose(d, 0.1, atol=1e-12)

    def test_wrap(self):
        ph = np.zeros((20, 3))
        ph[0], ph[1] = 3.0, -3.0
        _, d = features.phase_features(ph)
        np.testing.assert_allclose(d[0], 0.283185307179586477, atol=1e-12)

    def test_too_many_rows(self):
        with pytest.raises(ParameterError):
            features.phase_features(np.zeros((4, 3)), n_low=5)

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=30))
    def test_wrap_range(self, values):
        w = features.wrap_phase(values)
        assert np.all(w > -np.pi) and np.all(w <= np.pi)
        np.testing.assert_allclose(np.cos(w), np.cos(values), atol=1e-9)


class TestAssemble:
    def _parts(self, t):
        rng = np.random.default_rng(t)
        return rng.standard_normal((20, t)), rng.uniform(-3, 3, (5, t)), rng.uniform(-3, 3, (5, t))

    def test_truncates(self):
        m, p, d = self._parts(1999)
        blk = features.assemble_feature_block(m, p, d)
        assert blk.shape == (30, 1997)
        np.testing.assert_array_equal(blk.data, np.vstack([m, p, d])[:, :1997])

    def test_pass_through(self):
        m, p, d = self._parts(1997)
        np.testing.assert_array_equal(features.assemble_feature_block(m, p, d).data,
                                      np.vstack([m, p, d]))

    def test_pads(self):
        m, p, d = self._parts(1000)
        blk = features.assemble_feature_block(m, p, d)
        assert np.all(blk.data[:, 1000:] == 0.0)

    def test_mismatched_frames(self):
        m, p, d = self._parts(50)
        with pytest.raises(ParameterError):
            features.assemble_feature_block(m, p[:, :49], d)

    def test_standardisation_only_touches_magnitude(self):
        m, p, d = self._parts(1997)
        stats = features.FeatureStats(np.full(20, 2.0), np.full(20, 4.0))
        blk = features.assemble_feature_block(m, p, d, stats=stats)
        np.testing.assert_allclose(blk.magnitude, (m - 2.0) / 4.0)
        np.testing.assert_array_equal(blk.phase, p)


class TestFeatureBlock:
    def test_shape_and_ranges(self, bank):
        rng = np.random.default_rng(9)
        blk = features.featurize_clip(AudioClip(0.1 * rng.standard_normal(64000)), bank)
        assert blk.shape == (30, 1997)
        assert np.all(np.isfinite(blk.data))
        rows = blk.data[20:]
        assert np.all(rows > -np.pi) and np.all(rows <= np.pi)

    def test_short_clip_is_padded_to_four_seconds(self, bank):
        blk = features.featurize_clip(AudioClip(0.1 * np.ones(20000)), bank)
        assert blk.shape == (30, 1997)


class TestRvfb:
    def test_round_trip_is_bit_exact(self, tmp_path):
        data = np.random.default_rng(0).standard_normal((30, 1997)).astype(np.float32)
        features.write_rvfb(tmp_path / "a.rvfb", data)
        back = features.read_rvfb(tmp_path / "a.rvfb")
        assert back.tobytes() == data.tobytes()

    def test_layout(self, tmp_path):
        features.write_rvfb(tmp_path / "b.rvfb", np.array([[1.0, 2.0, 3.0]]))
        raw = (tmp_path / "b.rvfb").read_bytes()
        assert raw[:4] == b"RVFB"
        assert raw[4:12] == (1).to_bytes(4, "little") + (3).to_bytes(4, "little")
        assert np.frombuffer(raw[12:], "<f4").tolist() == [1.0, 2.0, 3.0]

    @pytest.mark.parametrize("payload", [b"NOPE" + bytes(8), b"RVFB" + (2).to_bytes(4, "little")
                                         + (2).to_bytes(4, "little") + bytes(4)])
    def test_malformed(self, tmp_path, payload):
        (tmp_path / "c.rvfb").write_bytes(payload)
        with pytest.raises(DataFormatError):
            features.read_rvfb(tmp_path / "c.rvfb")
