"""Command-line entry point.

::

    roomvol [--seed N] [--profile desk|full] [--out DIR] [--config FILE] COMMAND [options]

Commands: simulate, build, featurize, train, eval, predict, plot.

Option values resolve as built-in defaults < ``--config`` JSON <
``ROOMVOL_SEED`` / ``ROOMVOL_PROFILE`` < explicit flags. Every run writes
``<out>/<command>_config.json`` with the fully resolved values; passing that
file back through ``--config`` repeats the run.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import checkpoint, dataset, features, model, plots, room, train
from .errors import AssetError, ConfigurationError, EstimationError, RoomVolError
from .wavio import read_wav

log = logging.getLogger("roomvol")

LOCK_NAME = ".roomvol.lock"
GLOBAL_DEFAULTS = {"seed": 0, "profile": "desk", "out": "roomvol-out"}

COMMAND_DEFAULTS = {
    "simulate": {"rooms": 30, "volume_range": [12.0, 21000.0], "rt60_range": [0.2, 1.5],
                 "max_order": None},
    "build": {"speech": "synthetic", "rirs": None, "dataset": "I", "allow_simulated_test": False,
              "n_speech": None},
    "featurize": {"manifest": None, "audio": None},
    "train": {"features": None, "pretrained": None, "epochs": None, "batch_size": None,
              "learning_rate": 1e-4, "weight_decay": 1e-4, "stop_below": None, "dropout": None},
    "eval": {"features": None, "checkpoint": None, "split": "test", "bins": 10},
    "predict": {"checkpoint": None, "wav": None},
    "plot": {"confusion": None, "history": None},
}

# values filled from the profile when left unset
PROFILE_DEFAULTS = {
    "desk": {"epochs": 20, "batch_size": 16, "n_speech": dataset.PROFILES["desk"]["n_speech"]},
    "full": {"epochs": 150, "batch_size": 32, "n_speech": dataset.PROFILES["full"]["n_speech"]},
}

REQUIRED = {
    "build": ["rirs"],
    "featurize": ["manifest"],
    "train": ["features"],
    "eval": ["features", "checkpoint"],
    "predict": ["checkpoint", "wav"],
}

PATH_KEYS = {"out", "rirs", "manifest", "audio", "features", "pretrained", "checkpoint", "wav",
             "confusion", "history"}


class UsageError(RoomVolError):
    exit_code = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_globals(p):
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master random seed")
    p.add_argument("--profile", choices=sorted(PROFILE_DEFAULTS), default=argparse.SUPPRESS,
                   help="size profile (default desk)")
    p.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    p.add_argument("--config", default=argparse.SUPPRESS, help="JSON file overriding defaults")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)


def build_parser():
    sup = argparse.SUPPRESS
    parser = _Parser(prog="roomvol", description="Blind room-volume estimation pipeline.")
    _add_globals(parser)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("simulate", help="simulate shoebox RIRs")
    p.add_argument("--rooms", type=int, default=sup)
    p.add_argument("--volume-range", type=float, nargs=2, metavar=("MIN", "MAX"), default=sup)
    p.add_argument("--rt60-range", type=float, nargs=2, metavar=("MIN", "MAX"), default=sup)
    p.add_argument("--max-order", type=int, default=sup, help="reflection order (default: auto)")

    p = sub.add_parser("build", help="build a manifest and render its audio")
    p.add_argument("--speech", default=sup, help="directory of 16 kHz WAVs, or 'synthetic'")
    p.add_argument("--rirs", nargs="+", default=sup, help="RIR store directories")
    p.add_argument("--dataset", choices=["I", "II"], default=sup)
    p.add_argument("--allow-simulated-test", action="store_true", default=sup)
    p.add_argument("--n-speech", type=int, default=sup, help="number of synthetic utterances")

    p = sub.add_parser("featurize", help="compute feature blocks for a manifest")
    p.add_argument("--manifest", default=sup)
    p.add_argument("--audio", default=sup, help="rendered audio (default: <manifest dir>/audio)")

    p = sub.add_parser("train", help="train the patch regressor")
    p.add_argument("--features", default=sup, help="feature directory with index.csv")
    p.add_argument("--pretrained", default=sup, help="RVCK pretrained-import file")
    p.add_argument("--epochs", type=int, default=sup)
    p.add_argument("--batch-size", type=int, default=sup)
    p.add_argument("--learning-rate", type=float, default=sup)
    p.add_argument("--weight-decay", type=float, default=sup)
    p.add_argument("--stop-below", type=float, default=sup,
                   help="also stop once validation MSE falls below this value")
    p.add_argument("--dropout", type=float, default=sup)

    p = sub.add_parser("eval", help="score a checkpoint on one split")
    p.add_argument("--features", default=sup)
    p.add_argument("--checkpoint", default=sup)
    p.add_argument("--split", choices=list(dataset.SPLITS), default=sup)
    p.add_argument("--bins", type=int, default=sup, help="confusion bins over the label map")

    p = sub.add_parser("predict", help="estimate the volume for one WAV file")
    p.add_argument("--checkpoint", default=sup)
    p.add_argument("wav", nargs="?", default=sup)

    p = sub.add_parser("plot", help="render SVGs from existing CSV outputs")
    p.add_argument("--confusion", default=sup, help="confusion CSV")
    p.add_argument("--history", default=sup, help="training history CSV")

    for name, sp in sub.choices.items():
        _add_globals(sp)
    return parser


def resolve_config(explicit, environ=None):
    """Merge defaults, the ``--config`` file, environment and explicit flags."""
    environ = os.environ if environ is None else environ
    explicit = dict(explicit)
    explicit.pop("verbose", None)
    file_cfg = {}
    if explicit.get("config"):
        path = explicit.pop("config")
        try:
            file_cfg = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise AssetError(f"missing config file {path}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(file_cfg, dict):
            raise UsageError(f"{path}: config must be a JSON object")
    explicit.pop("config", None)
    command = explicit.pop("command", None) or file_cfg.get("command")
    if command not in COMMAND_DEFAULTS:
        raise UsageError(f"missing or unknown command {command!r}")

    cfg = {**GLOBAL_DEFAULTS, **COMMAND_DEFAULTS[command]}
    unknown = set(file_cfg) - set(cfg) - {"command"}
    if unknown:
        raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
    cfg.update({k: v for k, v in file_cfg.items() if k != "command"})
    if "ROOMVOL_SEED" in environ:
        try:
            cfg["seed"] = int(environ["ROOMVOL_SEED"])
        except ValueError as exc:
            raise UsageError(f"ROOMVOL_SEED must be an integer, got {environ['ROOMVOL_SEED']!r}") from exc
    if "ROOMVOL_PROFILE" in environ:
        cfg["profile"] = environ["ROOMVOL_PROFILE"]
    cfg.update(explicit)

    if cfg["profile"] not in PROFILE_DEFAULTS:
        raise UsageError(f"unknown profile {cfg['profile']!r}")
    for key, value in PROFILE_DEFAULTS[cfg["profile"]].items():
        if key in cfg and cfg[key] is None:
            cfg[key] = value
    for key in REQUIRED.get(command, []):
        if cfg.get(key) in (None, []):
            raise UsageError(f"{command}: --{key.replace('_', '-')} is required")
    if command == "plot" and not (cfg["confusion"] or cfg["history"]):
        raise UsageError("plot: give --confusion and/or --history")
    if command == "featurize" and cfg["audio"] is None:
        cfg["audio"] = str(Path(cfg["manifest"]).parent / "audio")
    for key in PATH_KEYS & set(cfg):
        v = cfg[key]
        if isinstance(v, list):
            cfg[key] = [str(Path(p).resolve()) for p in v]
        elif v is not None and not (key == "speech"):
            cfg[key] = str(Path(v).resolve())
    if command == "build" and isinstance(cfg["rirs"], str):
        cfg["rirs"] = [cfg["rirs"]]
    if command == "build" and cfg["speech"] != "synthetic":
        cfg["speech"] = str(Path(cfg["speech"]).resolve())
    cfg["command"] = command
    return cfg


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _fail_on_errors(errors, out, name):
    """Write a per-record error report and raise with the most severe exit code."""
    if not errors:
        return
    _write_json(out / name, errors)
    for e in errors:
        print(f"  {e['id']}: {e['error']}", file=sys.stderr)
    code = max(e.get("exit_code", 2) for e in errors)
    err = RoomVolError(f"{len(errors)} record(s) failed; see {out / name}")
    err.exit_code = code
    raise err


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_simulate(cfg, out):
    store = out / "rirs"
    store.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(cfg["seed"]).generate_state(cfg["rooms"]) if cfg["rooms"] else []
    print(f"{'id':<10}{'volume_m3':>12}{'rt60_nom_s':>12}{'rt60_sch_s':>12}")
    rows = []
    for i, s in enumerate(seeds):
        spec = room.sample_room(cfg["volume_range"], cfg["rt60_range"], int(s),
                                max_order=cfg["max_order"])
        rir_id = f"sim{i:04d}"
        rir = room.simulate_shoebox_rir(spec, rir_id)
        room.write_rir(store, rir_id, rir)
        try:
            measured = room.schroeder_rt60(rir)
        except EstimationError:
            measured = math.nan
        rows.append((rir_id, rir.meta.volume, rir.meta.rt60_nominal, measured))
        print(f"{rir_id:<10}{rir.meta.volume:>12.2f}{rir.meta.rt60_nominal:>12.3f}{measured:>12.3f}")
    with open(out / "simulate_summary.csv", "w") as fh:
        fh.write("id,volume_m3,rt60_nominal_s,rt60_schroeder_s\n")
        for r in rows:
            fh.write(f"{r[0]},{r[1]!r},{r[2]!r},{r[3]!r}\n")
    print(f"wrote {len(rows)} RIRs to {store}")


def cmd_build(cfg, out):
    records = room.list_rir_records(cfg["rirs"])
    if not records:
        raise AssetError(f"no RIR records in {cfg['rirs']}")
    if cfg["speech"] == "synthetic":
        speech = dataset.SpeechSource(n_synthetic=cfg["n_speech"])
    else:
        speech = dataset.SpeechSource(cfg["speech"])
    manifest = dataset.profile_manifest(cfg["profile"], speech.ids, records, cfg["dataset"],
                                        rng_seed=cfg["seed"],
                                        allow_simulated_test=cfg["allow_simulated_test"])
    manifest.save(out / "manifest.json")
    counts = manifest.counts()
    n_aug = sum(r.augmented for r in manifest.records)
    print(f"manifest: train {counts['train']} ({n_aug} augmented), "
          f"validation {counts['validation']}, test {counts['test']}")
    errors = dataset.render_dataset(manifest, speech, records, out / "audio")
    _fail_on_errors(errors, out, "build_errors.json")
    print(f"rendered {len(manifest.records)} clips to {out / 'audio'}")


def cmd_featurize(cfg, out):
    manifest = dataset.DatasetManifest.load(cfg["manifest"])
    rows, errors = dataset.featurize_dataset(manifest, cfg["audio"], out / "features")
    print(f"wrote {len(rows)} feature blocks to {out / 'features'}")
    _fail_on_errors(errors, out, "featurize_errors.json")


def cmd_train(cfg, out):
    rows = dataset.read_feature_index(cfg["features"])
    _, x_tr, y_tr = dataset.load_split(rows, "train")
    _, x_va, y_va = dataset.load_split(rows, "validation")
    if not len(y_tr) or not len(y_va):
        raise ConfigurationError("feature index needs nonempty train and validation splits")
    mcfg = model.PROFILES[cfg["profile"]]
    if cfg["dropout"] is not None:
        mcfg = mcfg.replace(dropout=cfg["dropout"])
    if cfg["pretrained"]:
        init = checkpoint.import_pretrained(cfg["pretrained"], mcfg, seed=cfg["seed"])
    else:
        init = model.init_params(mcfg, seed=cfg["seed"])
    tcfg = train.TrainConfig(epochs_max=cfg["epochs"], batch_size=cfg["batch_size"],
                             learning_rate=cfg["learning_rate"], weight_decay=cfg["weight_decay"],
                             rng_seed=cfg["seed"], stop_below=cfg["stop_below"])
    best, history = train.train((x_tr, y_tr), (x_va, y_va), tcfg, init,
                                on_epoch=lambda r: log.info("epoch %(epoch)d train %(train_loss).6g "
                                                            "val %(val_loss).6g lr %(lr).3g", r))
    checkpoint.save_checkpoint(out / "model.rvck", best,
                               {"best_epoch": history.best_epoch, "epochs_run": len(history.rows),
                                "stopped_early": history.stopped_early})
    history.write_csv(out / "history.csv")
    plots.history_svg(history.rows, out / "history.svg")
    print(f"trained {len(history.rows)} epochs, best epoch {history.best_epoch} "
          f"(val MSE {min(history.val_losses):.6g}); checkpoint {out / 'model.rvck'}")


def cmd_eval(cfg, out):
    params = checkpoint.load_checkpoint(cfg["checkpoint"])
    rows = dataset.read_feature_index(cfg["features"])
    ev = train.evaluate(params, rows, cfg["split"])
    metrics = ev.report.to_json()
    metrics["split"] = cfg["split"]
    _write_json(out / "metrics.json", metrics)
    ev.write_predictions(out / "predictions.csv")
    edges = train.default_bins(params.label_map, cfg["bins"])
    counts = train.confusion_hist(ev.predictions, ev.targets, edges)
    train.write_confusion_csv(out / "confusion.csv", counts, edges)
    plots.confusion_svg(counts, edges, out / "confusion.svg")
    rho = "n/a" if metrics["rho"] is None else f"{metrics['rho']:.4f}"
    print(f"{cfg['split']}: n={metrics['n']} mse={metrics['mse']:.6g} mae={metrics['mae']:.6g} "
          f"rho={rho} mm={metrics['mm']:.6g}")
    _fail_on_errors(ev.errors, out, "eval_errors.json")


def cmd_predict(cfg, out):
    params = checkpoint.load_checkpoint(cfg["checkpoint"])
    clip = read_wav(cfg["wav"], features.SAMPLE_RATE)
    block = features.featurize_clip(clip, features.design_gammatone_bank())
    # same float32 rounding as stored feature files
    x = block.data.astype(np.float32).astype(np.float64)
    log_v = float(model.predict_log_volume(x, params))
    result = {"wav": cfg["wav"], "log10_volume": log_v, "volume_m3": 10.0 ** log_v}
    _write_json(out / "prediction.json", result)
    print(json.dumps(result))


def cmd_plot(cfg, out):
    if cfg["confusion"]:
        counts, edges = train.read_confusion_csv(cfg["confusion"])
        plots.confusion_svg(counts, edges, out / "confusion.svg")
        print(f"wrote {out / 'confusion.svg'}")
    if cfg["history"]:
        plots.history_svg(plots.read_history_csv(cfg["history"]), out / "history.svg")
        print(f"wrote {out / 'history.svg'}")


COMMANDS = {"simulate": cmd_simulate, "build": cmd_build, "featurize": cmd_featurize,
            "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict, "plot": cmd_plot}


def run(cfg):
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise AssetError(f"cannot create output directory {out}: {exc}") from exc
    lock = FileLock(str(out / LOCK_NAME), timeout=0)
    try:
        lock.acquire()
    except Timeout as exc:
        raise AssetError(f"output directory {out} is in use by another process") from exc
    except OSError as exc:
        raise AssetError(f"cannot lock {out}: {exc}") from exc
    try:
        _write_json(out / f"{cfg['command']}_config.json", cfg)
        COMMANDS[cfg["command"]](cfg, out)
    finally:
        lock.release()


def main(argv=None):
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        explicit = vars(ns)
        logging.basicConfig(level=logging.INFO if explicit.get("verbose") else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(explicit)
        run(cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except RoomVolError as exc:
        print(f"roomvol: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"roomvol: I/O error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
