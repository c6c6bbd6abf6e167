"""Training loop, MAE evaluation and per-case reporting."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import nncore
from .errors import DivergedTrainingError, InvalidArgumentError
from .nncore import CSEPNN, MLP, AdamWState, adamw_step, backward, forward, huber_loss, init_network, predict
from .pipeline import Dataset


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 1024
    epochs: int = 100
    seed: int = 0
    model_kind: str = CSEPNN
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidArgumentError("learning_rate must be > 0")
        if self.batch_size < 2:
            raise InvalidArgumentError("batch_size must be >= 2")
        if self.epochs < 1:
            raise InvalidArgumentError("epochs must be >= 1")
        if self.model_kind not in (CSEPNN, MLP):
            raise InvalidArgumentError(f"model_kind must be {CSEPNN!r} or {MLP!r}")
        if not 0 <= self.seed < 2**64:
            raise InvalidArgumentError("seed must be a 64-bit unsigned integer")
        if self.weight_decay < 0:
            raise InvalidArgumentError("weight_decay must be >= 0")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_mae: float
    wall_ms: float = field(default=0.0, compare=False)


@dataclass
class MetricsLog:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def val_mae(self):
        return np.array([r.val_mae for r in self.records])

    @property
    def train_loss(self):
        return np.array([r.train_loss for r in self.records])

    @property
    def final_val_mae(self):
        return self.records[-1].val_mae


@dataclass(frozen=True)
class CaseRow:
    case_id: str
    sample_size: int
    mean_true_cse: float
    mean_pred_cse: float
    mae: float


@dataclass
class CaseReport:
    rows: list


def _batches(order, batch_size):
    """Mini-batches over ``order``; a trailing single row joins the previous batch."""
    bounds = list(range(0, len(order), batch_size)) + [len(order)]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        del bounds[-2]
    return [order[a:b] for a, b in zip(bounds, bounds[1:])]


def train(dataset: Dataset, cfg: TrainConfig, widths=None, on_epoch=None):
    """Fixed-budget training; returns the final-epoch network and its log.

    ``on_epoch(record)`` is called after each epoch, e.g. for progress lines.
    """
    X_tr, y_tr = dataset.part("train")
    X_val, y_val = dataset.part("val")
    if len(y_tr) < 2 or len(y_val) < 1:
        raise InvalidArgumentError("need at least 2 train rows and 1 validation row")
    delta = nncore.delta_from_labels(y_tr)
    net = init_network(cfg.seed, cfg.model_kind, widths)
    opt = AdamWState(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps_opt, cfg.weight_decay)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5EED]))
    log = MetricsLog()

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        net.train()
        order = shuffle_rng.permutation(len(y_tr))
        loss_sum = 0.0
        for idx in _batches(order, cfg.batch_size):
            pred, cache = forward(net, X_tr[idx])
            loss, dpred = huber_loss(y_tr[idx], pred, delta)
            if not np.isfinite(loss):
                raise DivergedTrainingError(f"non-finite training loss at epoch {epoch}")
            grads = backward(net, cache, dpred)
            try:
                adamw_step(opt, net.params, grads)
            except DivergedTrainingError as exc:
                raise DivergedTrainingError(f"epoch {epoch}: {exc}") from None
            loss_sum += loss * len(idx)
        val_mae = evaluate_mae(net, X_val, y_val)
        rec = EpochRecord(epoch, loss_sum / len(y_tr), val_mae, (time.perf_counter() - t0) * 1000.0)
        log.records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    net.eval()
    return net, log


def train_mlp_baseline(dataset: Dataset, cfg: TrainConfig, widths=None, on_epoch=None):
    """Same protocol as :func:`train` with the plain feed-forward benchmark."""
    from dataclasses import replace

    return train(dataset, replace(cfg, model_kind=MLP), widths, on_epoch)


def predict_clamped(net, X):
    """Eval-mode predictions with negatives clamped to 0, as used in every report."""
    return np.maximum(predict(net, X), 0.0)


def evaluate_mae(net, features, labels) -> float:
    y = np.asarray(labels, dtype=float)
    if y.size == 0:
        raise InvalidArgumentError("evaluate_mae needs at least one sample")
    return float(np.mean(np.abs(predict_clamped(net, features) - y)))


def constant_predictor_mae(train_labels, labels) -> float:
    """MAE of always predicting the mean training label."""
    return float(np.mean(np.abs(np.asarray(labels) - np.mean(train_labels))))


def case_report(net, cases) -> CaseReport:
    """``cases``: iterable of ``(case_id, features, labels, se_values)``."""
    rows = []
    for case_id, X, y, _se in cases:
        y = np.asarray(y, dtype=float)
        if y.size == 0:
            raise InvalidArgumentError(f"case {case_id!r} is empty")
        pred = predict_clamped(net, X)
        rows.append(CaseRow(str(case_id), int(y.size), float(y.mean()), float(pred.mean()),
                            float(np.mean(np.abs(pred - y)))))
    return CaseReport(rows)


def _write_lines(path, header_lines, columns, rows):
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(str(v) if isinstance(v, (int, str)) else "%.9g" % v for v in row) + "\n")


def write_metrics(log: MetricsLog, path, header_lines=()):
    _write_lines(path, header_lines, ["epoch", "train_loss", "val_mae"],
                 [(r.epoch, r.train_loss, r.val_mae) for r in log.records])


def write_timing(log: MetricsLog, path, header_lines=()):
    _write_lines(path, header_lines, ["epoch", "ms"], [(r.epoch, r.wall_ms) for r in log.records])


def write_case_report(report: CaseReport, path, header_lines=()):
    _write_lines(path, header_lines, ["case", "sample_size", "true_cse_avg", "pred_cse_avg", "mae"],
                 [(r.case_id, r.sample_size, r.mean_true_cse, r.mean_pred_cse, r.mae) for r in report.rows])


def export_scatter(net, features, labels, path, header_lines=()):
    """``true_cse,pred_cse`` per sample, predictions clamped at 0."""
    y = np.asarray(labels, dtype=float)
    if y.size == 0:
        raise InvalidArgumentError("scatter export needs at least one sample")
    pred = predict_clamped(net, features)
    _write_lines(path, header_lines, ["true_cse", "pred_cse"], zip(y, pred))
    return pred


def export_histogram(net, cases, path, header_lines=()):
    """Per case: mean ST SE, mean true CSE, mean predicted CSE."""
    rows = []
    for case_id, X, y, se in cases:
        y = np.asarray(y, dtype=float)
        if y.size == 0:
            raise InvalidArgumentError(f"case {case_id!r} is empty")
        rows.append((str(case_id), float(np.mean(se)), float(y.mean()), float(predict_clamped(net, X).mean())))
    _write_lines(path, header_lines, ["case", "se_avg", "true_cse_avg", "pred_cse_avg"], rows)
    return rows
