import json

import numpy as np
import pytest
from filelock import FileLock

from roomvol import checkpoint, cli, dataset, features, model, train
from roomvol.model import ModelConfig, PatchGrid


def run(*argv):
    return cli.main([str(a) for a in argv])


class TestUsage:
    def test_no_command(self, capsys):
        assert run() == 1

    def test_unknown_command(self, capsys):
        assert run("frobnicate") == 1

    def test_bad_flag(self, tmp_path):
        assert run("--out", tmp_path, "simulate", "--rooms", "many") == 1

    def test_missing_required(self, tmp_path):
        assert run("--out", tmp_path, "eval", "--features", tmp_path) == 1

    def test_bad_env_seed(self, tmp_path, monkeypatch):
        monkeypatch.setenv("ROOMVOL_SEED", "abc")
        assert run("--out", tmp_path, "simulate", "--rooms", 0) == 1

    def test_unknown_config_key(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"command": "simulate", "roms": 3}))
        assert run("--config", tmp_path / "c.json", "--out", tmp_path / "o") == 1


class TestConfigResolution:
    def test_precedence(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"seed": 5, "rooms": 7}))
        env = {"ROOMVOL_SEED": "9", "ROOMVOL_PROFILE": "full"}
        cfg = cli.resolve_config({"command": "simulate", "config": str(tmp_path / "c.json")}, env)
        assert (cfg["seed"], cfg["rooms"], cfg["profile"]) == (9, 7, "full")
        cfg = cli.resolve_config({"command": "simulate", "seed": 1}, env)
        assert cfg["seed"] == 1

    def test_profile_fills_training_defaults(self):
        cfg = cli.resolve_config({"command": "train", "features": "f"}, {})
        assert (cfg["epochs"], cfg["batch_size"]) == (20, 16)
        cfg = cli.resolve_config({"command": "train", "features": "f", "profile": "full"}, {})
        assert (cfg["epochs"], cfg["batch_size"]) == (150, 32)

    def test_featurize_audio_default(self, tmp_path):
        cfg = cli.resolve_config({"command": "featurize", "manifest": str(tmp_path / "m.json")}, {})
        assert cfg["audio"] == str(tmp_path / "audio")


class TestSimulate:
    def test_zero_rooms(self, tmp_path):
        assert run("--out", tmp_path, "simulate", "--rooms", 0) == 0
        assert list((tmp_path / "rirs").iterdir()) == []

    def test_deterministic_metadata(self, tmp_path):
        args = ["simulate", "--rooms", 3, "--volume-range", 20, 200, "--rt60-range", 0.2, 0.4]
        assert run("--seed", 4, "--out", tmp_path / "a", *args) == 0
        assert run("--seed", 4, "--out", tmp_path / "b", *args) == 0
        for i in range(3):
            name = f"sim{i:04d}.json"
            assert (tmp_path / "a/rirs" / name).read_text() == (tmp_path / "b/rirs" / name).read_text()

    def test_resolved_config_reproduces_run(self, tmp_path):
        assert run("--seed", 2, "--out", tmp_path / "a", "simulate", "--rooms", 2,
                   "--volume-range", 30, 90, "--rt60-range", 0.2, 0.3) == 0
        cfg = json.loads((tmp_path / "a/simulate_config.json").read_text())
        assert cfg["command"] == "simulate" and cfg["seed"] == 2 and cfg["rooms"] == 2
        cfg["out"] = str(tmp_path / "b")
        (tmp_path / "again.json").write_text(json.dumps(cfg))
        assert run("--config", tmp_path / "again.json") == 0
        for name in ("sim0000.wav", "sim0001.json"):
            assert (tmp_path / "a/rirs" / name).read_bytes() == (tmp_path / "b/rirs" / name).read_bytes()

    def test_unwritable_output(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert run("--out", blocker / "sub", "simulate", "--rooms", 1) == 2

    def test_locked_output(self, tmp_path):
        with FileLock(str(tmp_path / cli.LOCK_NAME)):
            assert run("--out", tmp_path, "simulate", "--rooms", 0) == 2


class TestBuild:
    def test_missing_store(self, tmp_path):
        assert run("--out", tmp_path, "build", "--rirs", tmp_path / "nope") == 2

    def test_no_external_rooms(self, tmp_path):
        assert run("--out", tmp_path / "s", "simulate", "--rooms", 5, "--volume-range", 20, 60,
                   "--rt60-range", 0.2, 0.3) == 0
        assert run("--out", tmp_path / "b", "build", "--rirs", tmp_path / "s/rirs") == 2

    def test_missing_speech_dir(self, tmp_path, external_store):
        assert run("--out", tmp_path, "build", "--rirs", external_store,
                   "--speech", tmp_path / "nowhere") == 2


class TestFeaturize:
    def test_missing_audio(self, tmp_path):
        rec = dataset.ManifestRecord("syn0000", "sim0000", dataset.NoiseSpec(), False, "train", 2.0)
        dataset.DatasetManifest((rec,)).save(tmp_path / "m.json")
        assert run("--out", tmp_path / "o", "featurize", "--manifest", tmp_path / "m.json") == 2
        report = json.loads((tmp_path / "o/featurize_errors.json").read_text())
        assert report[0]["id"] == rec.id


def small_feature_store(root, n=4):
    """Index with tiny random RVFB files for train/validation/test."""
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(0)
    rows = []
    for i in range(n):
        name = f"r{i}.rvfb"
        features.write_rvfb(root / name, rng.standard_normal((30, 1997)))
        rows.append(f"r{i},{name},{1.5 + 0.5 * i!r},{dataset.SPLITS[i % 3]}")
    (root / "index.csv").write_text("id,path,label_log10_volume,split\n" + "\n".join(rows) + "\n")


class TestEvalErrors:
    def test_version_mismatch_exits_3(self, tmp_path):
        small_feature_store(tmp_path / "f")
        cfg = ModelConfig(width=16, layers=1, heads=2)
        checkpoint.save_checkpoint(tmp_path / "m.rvck", model.init_params(cfg))
        raw = bytearray((tmp_path / "m.rvck").read_bytes())
        raw[4:8] = (7).to_bytes(4, "little")
        (tmp_path / "m.rvck").write_bytes(bytes(raw))
        assert run("--out", tmp_path / "o", "eval", "--features", tmp_path / "f",
                   "--checkpoint", tmp_path / "m.rvck") == 3

    def test_malformed_feature_file_exits_4(self, tmp_path):
        small_feature_store(tmp_path / "f", n=6)
        (tmp_path / "f/r2.rvfb").write_bytes(b"RVFBgarbage")
        cfg = ModelConfig(width=16, layers=1, heads=2)
        checkpoint.save_checkpoint(tmp_path / "m.rvck", model.init_params(cfg))
        assert run("--out", tmp_path / "o", "eval", "--features", tmp_path / "f",
                   "--checkpoint", tmp_path / "m.rvck") == 4
        # the remaining test record is still scored
        metrics = json.loads((tmp_path / "o/metrics.json").read_text())
        assert metrics["n"] == 1 and metrics["n_errors"] == 1

    def test_eval_perfect_predictor_mm_is_one(self, tmp_path):
        small_feature_store(tmp_path / "f", n=6)
        cfg = ModelConfig(width=16, layers=1, heads=2)
        p = model.init_params(cfg)
        p.tensors["head_w"][:] = 0.0
        p.tensors["head_b"][:] = 0.0  # sigmoid(0) = 0.5 -> 2.75 for every record
        checkpoint.save_checkpoint(tmp_path / "m.rvck", p)
        rows = "id,path,label_log10_volume,split\n" + "".join(
            f"r{i},r{i}.rvfb,2.75,test\n" for i in range(6))
        (tmp_path / "f/index.csv").write_text(rows)
        assert run("--out", tmp_path / "o", "eval", "--features", tmp_path / "f",
                   "--checkpoint", tmp_path / "m.rvck") == 0
        metrics = json.loads((tmp_path / "o/metrics.json").read_text())
        assert metrics["mm"] == 1.0 and metrics["mse"] == 0.0 and metrics["rho"] is None


class TestPlot:
    def test_svgs_from_csvs(self, tmp_path):
        edges = train.default_bins((1.0, 4.5))
        train.write_confusion_csv(tmp_path / "c.csv", np.eye(10, dtype=int) * 3, edges)
        (tmp_path / "h.csv").write_text("epoch,train_loss,val_loss,lr\n0,1.0,1.2,0.001\n1,0.5,0.7,0.001\n")
        assert run("--out", tmp_path / "o", "plot", "--confusion", tmp_path / "c.csv",
                   "--history", tmp_path / "h.csv") == 0
        svg = (tmp_path / "o/confusion.svg").read_text()
        assert svg.startswith("<svg") and "stroke-dasharray" in svg
        assert "<polyline" in (tmp_path / "o/history.svg").read_text()

    def test_nothing_to_plot(self, tmp_path):
        assert run("--out", tmp_path, "plot") == 1

    def test_bad_csv(self, tmp_path):
        (tmp_path / "c.csv").write_text("hello\n")
        assert run("--out", tmp_path / "o", "plot", "--confusion", tmp_path / "c.csv") == 4


class TestPredict:
    def test_overfit_checkpoint_recovers_label(self, tmp_path, overfit_run, capsys):
        best, _ = overfit_run["runs"][0]
        checkpoint.save_checkpoint(tmp_path / "m.rvck", best)
        for k in (0, 5):
            assert run("--out", tmp_path / "o", "predict", "--checkpoint", tmp_path / "m.rvck",
                       overfit_run["paths"][k]) == 0
            result = json.loads((tmp_path / "o/prediction.json").read_text())
            assert abs(result["log10_volume"] - overfit_run["y"][k]) < 0.1
            assert result["volume_m3"] == pytest.approx(10 ** result["log10_volume"])

    def test_missing_wav(self, tmp_path):
        checkpoint.save_checkpoint(tmp_path / "m.rvck", model.init_params(ModelConfig(16, 1, 2)))
        assert run("--out", tmp_path, "predict", "--checkpoint", tmp_path / "m.rvck",
                   tmp_path / "none.wav") == 2
