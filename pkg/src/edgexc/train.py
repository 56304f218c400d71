"""Adam, training/validation loops and per-epoch metrics for the three experiment settings."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, NamedTuple

import numpy as np

from . import zoo
from .arch import ArchSpec
from .data import Cifar10Set, batch_iterator, load_cifar10_binary, make_synthetic, row_average
from .errors import DataError, NonFiniteLossError, ShapeError
from .model import ModelParams, forward, init_params, loss_and_grads
from .tensor import softmax_cross_entropy

log = logging.getLogger(__name__)

SETTINGS = {
    # setting -> (architecture, preprocessing)
    "xception": ("xception", "none"),
    "optimized": ("optimized", "none"),
    "optimized_with_data": ("optimized", "rowavg"),
}
CSV_COLUMNS = ("epoch", "train_time_s", "train_loss", "val_loss", "val_acc", "val_time_s", "est_peak_mem_bytes")
TIMING_COLUMNS = ("train_time_s", "val_time_s")


def setting_for(model: str, preprocess: str) -> str:
    for name, pair in SETTINGS.items():
        if pair == (model, preprocess):
            return name
    raise ValueError(f"--model {model} with --preprocess {preprocess} is not one of the experiment settings")


@dataclass
class TrainConfig:
    setting: str = "optimized"
    epochs: int = 10
    learning_rate: float = 2e-5
    batch_size: int = 64
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    data_dir: str | None = None
    synthetic: bool = False
    synthetic_train_per_class: int = 20
    synthetic_test_per_class: int = 5
    train_limit: int | None = None
    test_limit: int | None = None
    width_scale: float = 1.0
    num_classes: int = 10

    def validate(self):
        if self.setting not in SETTINGS:
            raise ValueError(f"unknown setting {self.setting!r}; choose from {sorted(SETTINGS)}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        return self

    @property
    def model(self) -> str:
        return SETTINGS[self.setting][0]

    @property
    def preprocess(self) -> str:
        return SETTINGS[self.setting][1]


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        m, v = {}, {}
        for lid, name, arr in params.trainable():
            m.setdefault(lid, {})[name] = np.zeros_like(arr)
            v.setdefault(lid, {})[name] = np.zeros_like(arr)
        return cls(m, v, 0)

    def copy(self) -> "AdamState":
        dup = lambda d: {k: {n: a.copy() for n, a in g.items()} for k, g in d.items()}  # noqa: E731
        return AdamState(dup(self.m), dup(self.v), self.t)


def adam_step(params: ModelParams, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, epsilon=1e-8):
    """One bias-corrected Adam update, in place: ``p -= lr * m_hat / (sqrt(v_hat) + eps)``."""
    state.t += 1
    c1 = 1 - beta1**state.t
    c2 = 1 - beta2**state.t
    for lid, name, p in params.trainable():
        try:
            g = grads[lid][name]
        except KeyError:
            raise ShapeError(f"no gradient for {lid}.{name}") from None
        m, v = state.m[lid][name], state.v[lid][name]
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"Adam shapes for {lid}.{name}", p.shape, g.shape)
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + epsilon)).astype(p.dtype, copy=False)
    return params, state


class EpochResult(NamedTuple):
    loss: float
    time_s: float
    accuracy: float


def train_epoch(
    spec: ArchSpec,
    params: ModelParams,
    opt_state: AdamState,
    batches: Iterable,
    cfg: TrainConfig,
    preprocess: Callable | None = None,
) -> EpochResult:
    """One pass over ``batches`` with batch norm in train mode.

    Returns the mean batch loss, the wall-clock time of the loop and the
    running train-mode accuracy.
    """
    start = time.perf_counter()
    losses, correct, seen = [], 0, 0
    for i, (x, y) in enumerate(batches):
        if preprocess is not None:
            x = preprocess(x)
        loss, grads, logits = loss_and_grads(spec, params, x, y, "train")
        if not math.isfinite(loss):
            raise NonFiniteLossError(i, loss)
        adam_step(params, grads, opt_state, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
        losses.append(loss)
        correct += int((logits.argmax(axis=1) == y).sum())
        seen += len(y)
    if not losses:
        raise ValueError("training data is empty")
    return EpochResult(float(np.mean(losses)), time.perf_counter() - start, correct / seen)


def evaluate(spec: ArchSpec, params: ModelParams, batches: Iterable, preprocess: Callable | None = None):
    """Return ``(val_loss, val_accuracy, val_time_s)``; loss is averaged per sample."""
    start = time.perf_counter()
    total, correct, n = 0.0, 0, 0
    for x, y in batches:
        if preprocess is not None:
            x = preprocess(x)
        logits = forward(spec, params, x, "eval")
        loss, _ = softmax_cross_entropy(logits, y)
        total += loss * len(y)
        correct += int((logits.argmax(axis=1) == y).sum())
        n += len(y)
    if n == 0:
        raise ValueError("cannot evaluate on an empty test set")
    return total / n, correct / n, time.perf_counter() - start


@dataclass
class RunMetrics:
    epoch: int
    train_time_s: float
    train_loss: float
    val_loss: float
    val_acc: float
    val_time_s: float
    est_peak_mem_bytes: int
    train_acc: float = field(default=float("nan"), compare=False)

    def csv_row(self) -> list[str]:
        row = []
        for col in CSV_COLUMNS:
            v = getattr(self, col)
            row.append(str(v) if isinstance(v, int) else f"{v:.6g}")
        return row


def load_datasets(cfg: TrainConfig) -> tuple[Cifar10Set, Cifar10Set]:
    if cfg.synthetic:
        train = make_synthetic(cfg.num_classes, cfg.synthetic_train_per_class, 32, seed=cfg.seed)
        test = make_synthetic(cfg.num_classes, cfg.synthetic_test_per_class, 32, seed=cfg.seed + 1, split="test")
    elif cfg.data_dir:
        train, test = load_cifar10_binary(cfg.data_dir)
    else:
        raise DataError("no dataset: set data_dir or synthetic")
    return train.subset(cfg.train_limit), test.subset(cfg.test_limit)


def run_experiment(
    cfg: TrainConfig,
    train: Cifar10Set | None = None,
    test: Cifar10Set | None = None,
    on_epoch: Callable[[RunMetrics, ModelParams], None] | None = None,
) -> list[RunMetrics]:
    """Train one of the three settings from scratch and record a metrics row per epoch."""
    cfg.validate()
    if train is None or test is None:
        train, test = load_datasets(cfg)
    spec = zoo.build(cfg.model, cfg.num_classes, cfg.width_scale)
    preprocess = row_average if cfg.preprocess == "rowavg" else None
    params = init_params(spec, cfg.seed)
    opt = AdamState.zeros_like(params)
    mem = zoo.estimate_memory(spec, cfg.batch_size, "single", training=True).total_bytes
    rows = []
    for epoch in range(1, cfg.epochs + 1):
        res = train_epoch(spec, params, opt, batch_iterator(train, cfg.batch_size, seed=[cfg.seed, epoch]), cfg, preprocess)
        val_loss, val_acc, val_time = evaluate(spec, params, batch_iterator(test, cfg.batch_size, shuffle=False), preprocess)
        row = RunMetrics(epoch, res.time_s, res.loss, val_loss, val_acc, val_time, mem, res.accuracy)
        log.info(
            "%s epoch %d: train_loss %.4f train_acc %.3f val_loss %.4f val_acc %.3f (%.1fs)",
            cfg.setting, epoch, res.loss, res.accuracy, val_loss, val_acc, res.time_s,
        )
        rows.append(row)
        if on_epoch is not None:
            on_epoch(row, params)
    return rows


def write_metrics_csv(rows: list[RunMetrics], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow(r.csv_row())


def read_metrics_csv(path) -> list[dict]:
    """Parse a metrics CSV, checking the header; values come back as floats (epoch as int)."""
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(header) != CSV_COLUMNS:
                raise DataError(f"{path}: header {header} does not match {','.join(CSV_COLUMNS)}")
            rows = []
            for line in reader:
                if len(line) != len(CSV_COLUMNS):
                    raise DataError(f"{path}: row {line} has {len(line)} fields")
                rec = {c: float(v) for c, v in zip(CSV_COLUMNS, line)}
                rec["epoch"] = int(rec["epoch"])
                rows.append(rec)
    except (OSError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"{path}: {exc}") from exc
    return rows


def metrics_from_dicts(rows: list[dict]) -> list[RunMetrics]:
    names = [f.name for f in fields(RunMetrics) if f.name in CSV_COLUMNS]
    return [RunMetrics(**{n: (int(r[n]) if n in ("epoch", "est_peak_mem_bytes") else r[n]) for n in names}) for r in rows]


__all__ = [
    "SETTINGS",
    "TrainConfig",
    "AdamState",
    "adam_step",
    "train_epoch",
    "evaluate",
    "RunMetrics",
    "run_experiment",
    "write_metrics_csv",
    "read_metrics_csv",
    "setting_for",
]
