"""Training (MSE, Adam with decoupled weight decay, plateau LR, early stopping) and metrics."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import features
from .errors import (AssetError, DataFormatError, EstimationError, NumericalError, ParameterError,
                     RoomVolError)
from .features import FeatureStats
from .model import backward, forward, predict_norm

log = logging.getLogger(__name__)

LN10 = math.log(10.0)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ParameterError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    if a.size == 0:
        raise ParameterError("empty input")
    return a, b


def mse_loss(pred, target):
    """Mean squared error and its gradient ``2 (pred - target) / n``."""
    pred, target = _pair(pred, target)
    diff = pred - target
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def mean_mult(pred_log10, target_log10):
    """``exp(mean |ln(V_hat / V)|)`` computed from log10 volumes."""
    pred, target = _pair(pred_log10, target_log10)
    return float(np.exp(np.mean(np.abs(LN10 * (pred - target)))))


def pearson(pred, target):
    """Sample Pearson correlation; raises if either sequence is constant."""
    pred, target = _pair(pred, target)
    if pred.size < 2:
        raise ParameterError("Pearson correlation needs at least two samples")
    pc, tc = pred - pred.mean(), target - target.mean()
    denom = math.sqrt(float(pc @ pc) * float(tc @ tc))
    if denom == 0.0:
        raise EstimationError("correlation undefined: zero variance")
    return float(np.clip((pc @ tc) / denom, -1.0, 1.0))


@dataclass(frozen=True)
class MetricsReport:
    mse: float
    mae: float
    rho: float | None
    mm: float
    n: int
    n_errors: int = 0

    def __post_init__(self):
        if self.mse < 0 or self.mae < 0 or self.mm < 1.0:
            raise ParameterError(f"inconsistent metrics {self}")
        if self.mae > math.sqrt(self.mse) * (1 + 1e-12) + 1e-15:
            raise ParameterError(f"MAE {self.mae} exceeds RMSE {math.sqrt(self.mse)}")

    def to_json(self):
        return asdict(self)


def compute_metrics(pred_log10, target_log10, n_errors=0):
    pred, target = _pair(pred_log10, target_log10)
    diff = pred - target
    try:
        rho = pearson(pred, target)
    except (EstimationError, ParameterError):
        rho = None
    return MetricsReport(mse=float(np.mean(diff ** 2)), mae=float(np.mean(np.abs(diff))),
                         rho=rho, mm=mean_mult(pred, target), n=int(pred.size), n_errors=n_errors)


def confusion_hist(pred_log10, target_log10, bins):
    """Counts with target bin on rows and predicted bin on columns.

    Values outside the edges fall into the first or last bin.
    """
    edges = np.asarray(bins, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 2:
        raise ParameterError("need at least two bin edges")
    if np.any(np.diff(edges) <= 0):
        raise ParameterError("bin edges must be strictly ascending")
    pred, target = _pair(pred_log10, target_log10)
    nb = edges.size - 1

    def index(v):
        return np.clip(np.searchsorted(edges, v, side="right") - 1, 0, nb - 1)

    counts = np.zeros((nb, nb), dtype=np.int64)
    np.add.at(counts, (index(target), index(pred)), 1)
    return counts


def default_bins(label_map, n_bins=10):
    return np.linspace(label_map[0], label_map[1], n_bins + 1)


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs_max: int = 150
    batch_size: int = 16
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    early_stop_patience: int = 10
    min_delta: float = 1e-6
    rng_seed: int = 0
    chunk: int = 4
    stop_below: float | None = None

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ParameterError("learning rate must be positive and weight decay non-negative")
        if not 0 < self.plateau_factor <= 1:
            raise ParameterError(f"plateau_factor must lie in (0, 1], got {self.plateau_factor}")
        if self.early_stop_patience < 1 or self.plateau_patience < 1:
            raise ParameterError("patience values must be >= 1")
        if self.epochs_max < 1 or self.batch_size < 1 or self.chunk < 1:
            raise ParameterError("epochs_max, batch_size and chunk must be >= 1")


class AdamW:
    """Adam with decoupled weight decay applied to matrix-shaped tensors."""

    def __init__(self, params, lr, weight_decay, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in params.tensors.items():
            g = grads[k]
            if self.weight_decay and p.ndim >= 2:
                p -= self.lr * self.weight_decay * p
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        params.bump()


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, optimizer, factor, patience, min_delta):
        self.opt = optimizer
        self.factor = factor
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.bad = 0

    def update(self, val_loss):
        if self.best - val_loss > self.min_delta:
            self.best = val_loss
            self.bad = 0
            return
        self.bad += 1
        if self.bad >= self.patience:
            self.opt.lr *= self.factor
            self.bad = 0


@dataclass
class History:
    rows: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    def append(self, epoch, train_loss, val_loss, lr):
        self.rows.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr})

    @property
    def val_losses(self):
        return [r["val_loss"] for r in self.rows]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss", "lr"])
            w.writeheader()
            for r in self.rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def batch_gradients(params, x, target_norm, rng=None, chunk=4):
    """Summed-loss gradients over a batch, accumulated chunk by chunk in a fixed order.

    The loss is the batch MSE in normalised label space.
    """
    n = x.shape[0]
    total = None
    sq = 0.0
    for s in range(0, n, chunk):
        y, cache = forward(x[s:s + chunk], params, rng=rng)
        diff = y - target_norm[s:s + chunk]
        sq += float(diff @ diff)
        g = backward(cache, 2.0 * diff / n)
        if total is None:
            total = g
        else:
            for k in total:
                total[k] += g[k]
    return sq / n, total


def validation_loss(params, x, target_norm):
    """Evaluation-mode MSE in normalised space on already standardised features."""
    if x.shape[0] == 0:
        raise ParameterError("empty validation set")
    y = np.concatenate([forward(x[s:s + 8], params)[0] for s in range(0, x.shape[0], 8)])
    return float(np.mean((y - target_norm) ** 2))


def train(train_set, val_set, config, init, validate=None, on_epoch=None):
    """Fit ``init`` (a ModelParams, not modified) and return the best-validation copy.

    Parameters
    ----------
    train_set, val_set : (X, labels_log10)
        Raw feature arrays ``(N, F, T)`` and log10 volume labels.
    config : TrainConfig
    init : ModelParams
        Starting point. If it carries no feature statistics they are fitted on
        the training features.
    validate : callable(params, epoch) -> float, optional
        Replaces the built-in validation loss.
    on_epoch : callable(row dict), optional
        Progress hook.

    Returns
    -------
    best : ModelParams
    history : History
    """
    x_tr, y_tr = (np.asarray(a, dtype=np.float64) for a in train_set)
    x_va, y_va = (np.asarray(a, dtype=np.float64) for a in val_set)
    if x_tr.shape[0] == 0 or (validate is None and x_va.shape[0] == 0):
        raise ParameterError("train and validation splits must be nonempty")
    params = init.copy()
    if params.stats is None:
        params.stats = FeatureStats.fit(x_tr)
    x_tr = params.prepare(x_tr)
    x_va = params.prepare(x_va) if x_va.size else x_va
    t_tr = params.to_norm(y_tr)
    t_va = params.to_norm(y_va) if y_va.size else y_va

    order_rng = np.random.default_rng(config.rng_seed)
    drop_rng = np.random.default_rng([config.rng_seed, 1])
    opt = AdamW(params, config.learning_rate, config.weight_decay)
    sched = PlateauScheduler(opt, config.plateau_factor, config.plateau_patience, config.min_delta)
    history = History()
    best, best_loss, bad = params.copy(), math.inf, 0

    for epoch in range(config.epochs_max):
        lr = opt.lr
        order = order_rng.permutation(x_tr.shape[0])
        sq_sum = 0.0
        for step, s in enumerate(range(0, len(order), config.batch_size)):
            idx = order[s:s + config.batch_size]
            loss, grads = batch_gradients(params, x_tr[idx], t_tr[idx], drop_rng, config.chunk)
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise NumericalError(f"divergence at epoch {epoch}, step {step}")
            opt.step(params, grads)
            sq_sum += loss * len(idx)
        train_loss = sq_sum / len(order)

        val = validate(params, epoch) if validate else validation_loss(params, x_va, t_va)
        if not math.isfinite(val):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        history.append(epoch, train_loss, float(val), lr)
        if on_epoch:
            on_epoch(history.rows[-1])
        log.info("epoch %d train %.6g val %.6g lr %.3g", epoch, train_loss, val, lr)

        if best_loss - val > config.min_delta:
            best_loss, bad = val, 0
            best = params.copy()
            history.best_epoch = epoch
        else:
            bad += 1
        sched.update(val)
        if bad >= config.early_stop_patience:
            history.stopped_early = True
            break
        if config.stop_below is not None and val < config.stop_below:
            break
    return best, history


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class Evaluation:
    report: MetricsReport
    ids: list
    targets: np.ndarray
    predictions: np.ndarray
    errors: list

    def write_predictions(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "target_log10", "pred_log10"])
            for i, t, p in zip(self.ids, self.targets, self.predictions):
                w.writerow([i, repr(float(t)), repr(float(p))])


def evaluate(params, rows, split=None):
    """Predict every indexed record (optionally one split) and score in log10 space.

    Unreadable feature files are collected in ``errors`` and excluded.
    """
    ids, targets, preds, errors = [], [], [], []
    for row in rows:
        if split is not None and row["split"] != split:
            continue
        try:
            x = features.read_rvfb(row["path"])
        except (RoomVolError, OSError) as exc:
            errors.append({"id": row["id"], "error": str(exc),
                           "exit_code": getattr(exc, "exit_code", 2)})
            continue
        ids.append(row["id"])
        targets.append(row["label_log10_volume"])
        preds.append(float(params.from_norm(predict_norm(x, params))))
    if not ids:
        raise ParameterError("no records could be evaluated")
    targets, preds = np.array(targets), np.array(preds)
    report = compute_metrics(preds, targets, n_errors=len(errors))
    return Evaluation(report, ids, targets, preds, errors)


def _read_csv_rows(path):
    try:
        with open(path, newline="") as fh:
            return list(csv.reader(fh))
    except FileNotFoundError as exc:
        raise AssetError(f"missing file {path}") from exc


def read_predictions(path):
    """(ids, targets, predictions) from a predictions CSV."""
    rows = _read_csv_rows(path)
    if not rows or rows[0] != ["id", "target_log10", "pred_log10"]:
        raise DataFormatError(f"{path}: header must be id,target_log10,pred_log10")
    try:
        return ([r[0] for r in rows[1:]], np.array([float(r[1]) for r in rows[1:]]),
                np.array([float(r[2]) for r in rows[1:]]))
    except (IndexError, ValueError) as exc:
        raise DataFormatError(f"{path}: {exc}") from exc


def write_confusion_csv(path, counts, edges):
    edges = [float(e) for e in edges]
    labels = [f"{edges[j]!r}..{edges[j + 1]!r}" for j in range(len(edges) - 1)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["target_bin\\pred_bin"] + labels)
        for label, row in zip(labels, counts):
            w.writerow([label] + [int(c) for c in row])


def read_confusion_csv(path):
    rows = _read_csv_rows(path)
    try:
        labels = rows[0][1:]
        edges = [float(labels[0].split("..")[0])] + [float(s.split("..")[1]) for s in labels]
        counts = np.array([[int(c) for c in r[1:]] for r in rows[1:]])
    except (IndexError, ValueError) as exc:
        raise DataFormatError(f"{path}: not a confusion matrix CSV ({exc})") from exc
    if counts.shape != (len(labels), len(labels)):
        raise DataFormatError(f"{path}: count matrix shape {counts.shape} does not match the bins")
    return counts, np.array(edges)


__all__ = ["mse_loss", "mean_mult", "pearson", "MetricsReport", "compute_metrics",
           "confusion_hist", "TrainConfig", "AdamW", "PlateauScheduler", "History",
           "train", "evaluate", "Evaluation", "batch_gradients", "validation_loss",
           "read_predictions", "write_confusion_csv", "read_confusion_csv", "default_bins"]
