"""Trainers: warm-up/self-loop training and a teacher-forced baseline.

The self-loop trainer drives each window exactly like the deployment-time
rollout (warm up on measurements, then feed predictions back) and scores only
the closed-loop predictions, so the network is optimized for the multi-step
behaviour the controller relies on. The teacher-forced trainer is the
conventional one-step-ahead scheme: contiguous substreams, chunked truncated
backprop, measured states at every input, hidden state handed across chunk
boundaries as a constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..data import SeriesLog, WindowedDataset
from ..errors import ConfigError, DimensionMismatchError, InsufficientDataError
from .backprop import (
    loss_and_grads,
    make_dropout_masks,
    teacher_forced_loss,
    teacher_forced_loss_and_grads,
)
from .model import Hidden, RnnModel
from .optim import Adam, PlateauScheduler


@dataclass
class TrainSpec:
    """Knobs shared by both trainers."""

    epochs: int = 150
    batch_size: int = 32
    lr: float = 1e-3
    lr_factor: float = 0.5
    lr_patience: int = 5
    min_lr: float = 1e-6
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")


def _batched(n: int, size: int) -> list[np.ndarray]:
    idx = np.arange(n)
    return [idx[s:s + size] for s in range(0, n, size)]


class SelfLoopTrainer:
    """Warm-up/self-loop trainer over a windowed dataset.

    ``run_epoch`` performs one full pass (shuffled train batches, one Adam
    step each, then a fixed-order validation sweep) and can be called
    repeatedly, which lets a search procedure advance trials one epoch at a
    time. Weights of the best validation epoch are kept and can be restored.
    """

    def __init__(self, model: RnnModel, train_ds: WindowedDataset,
                 val_ds: WindowedDataset, spec: TrainSpec):
        if len(train_ds) < 1 or len(val_ds) < 1:
            raise InsufficientDataError("need at least one train and one val window")
        if train_ds.state_dim != model.arch.state_dim \
                or train_ds.input_dim != model.arch.input_dim:
            raise DimensionMismatchError("dataset dims do not match the model")
        self.model = model
        self.train_ds = train_ds
        self.val_ds = val_ds
        self.spec = spec
        self.n_w = train_ds.n_w
        self.optimizer = Adam(model.params(), lr=spec.lr)
        self.scheduler = PlateauScheduler(self.optimizer, factor=spec.lr_factor,
                                          patience=spec.lr_patience,
                                          min_lr=spec.min_lr)
        self.epoch = 0
        self.best_val = np.inf
        self.best_weights: dict[str, np.ndarray] | None = None
        self.best_epoch = -1
        self.history: dict[str, list[float]] = {
            "train_loss": [], "val_loss": [], "lr": []}

    # -- epoch-level API -------------------------------------------------------

    def run_epoch(self) -> tuple[float, float]:
        rng = np.random.default_rng([self.spec.seed, self.epoch])
        order = rng.permutation(len(self.train_ds))
        se_sum = 0.0
        n_elem = 0
        for batch in _batched(len(order), self.spec.batch_size):
            idx = order[batch]
            x, u, y = self.train_ds.x[idx], self.train_ds.u[idx], self.train_ds.y[idx]
            masks = make_dropout_masks(self.model, len(idx),
                                       self.n_w + y.shape[1], rng)
            loss, grads, _ = loss_and_grads(self.model, x, u, y, self.n_w, masks)
            self.optimizer.step(grads)
            se_sum += loss * y.size
            n_elem += y.size
        train_loss = se_sum / n_elem
        val_loss = self.validate()
        self.scheduler.step(val_loss)
        if val_loss < self.best_val:
            self.best_val = val_loss
            self.best_weights = self.model.copy_weights()
            self.best_epoch = self.epoch
        self.history["train_loss"].append(train_loss)
        self.history["val_loss"].append(val_loss)
        self.history["lr"].append(self.optimizer.lr)
        self.epoch += 1
        return train_loss, val_loss

    def validate(self) -> float:
        """Dataset-wide self-loop MSE over the validation windows, fixed order."""
        se_sum = 0.0
        n_elem = 0
        for idx in _batched(len(self.val_ds), self.spec.batch_size):
            x, u, y = self.val_ds.x[idx], self.val_ds.u[idx], self.val_ds.y[idx]
            loss, _, _ = loss_and_grads(self.model, x, u, y, self.n_w, masks=None)
            se_sum += loss * y.size
            n_elem += y.size
        return se_sum / n_elem

    def restore_best(self) -> None:
        if self.best_weights is not None:
            self.model.load_weights(self.best_weights)


def train(model: RnnModel, train_ds: WindowedDataset, val_ds: WindowedDataset,
          spec: TrainSpec,
          callback: Callable[[int, float, float, float], None] | None = None
          ) -> dict[str, list[float]]:
    """Run the self-loop trainer to completion and restore the best weights."""
    trainer = SelfLoopTrainer(model, train_ds, val_ds, spec)
    for _ in range(spec.epochs):
        train_loss, val_loss = trainer.run_epoch()
        if callback is not None:
            callback(trainer.epoch, train_loss, val_loss, trainer.optimizer.lr)
    trainer.restore_best()
    model.meta["best_epoch"] = trainer.best_epoch
    model.meta["best_val"] = trainer.best_val
    return trainer.history


# ---------------------------------------------------------------------------
# teacher-forced baseline
# ---------------------------------------------------------------------------

@dataclass
class _Substreams:
    x: np.ndarray       # (n_streams, length, dx)
    u: np.ndarray       # (n_streams, length, du)


def _split_substreams(x: np.ndarray, u: np.ndarray, n_streams: int) -> _Substreams:
    n = x.shape[0]
    length = n // n_streams
    if length < 2:
        raise InsufficientDataError(
            f"{n} samples cannot feed {n_streams} substreams")
    xs = np.stack([x[i * length:(i + 1) * length] for i in range(n_streams)])
    us = np.stack([u[i * length:(i + 1) * length] for i in range(n_streams)])
    return _Substreams(x=xs, u=us)


class TeacherForcedTrainer:
    """Conventional one-step-ahead trainer on contiguous substreams.

    The scaled series is split into ``batch_size`` contiguous substreams that
    run in parallel as a batch. Each epoch walks the substreams in chunks of
    ``chunk`` steps: every step consumes the measured state, the loss covers
    every step, one Adam update per chunk, and the hidden state crosses chunk
    boundaries as a constant (gradients never reach earlier chunks). The tail
    fraction of each substream is held out for validation.
    """

    def __init__(self, model: RnnModel, log_x: np.ndarray, log_u: np.ndarray,
                 chunk: int, spec: TrainSpec, val_fraction: float = 0.3):
        log_x = np.asarray(log_x, dtype=float)
        log_u = np.asarray(log_u, dtype=float)
        if log_x.ndim != 2 or log_u.ndim != 2 or log_x.shape[0] != log_u.shape[0]:
            raise DimensionMismatchError("need matching 2-D state/input series")
        if chunk < 1:
            raise ConfigError("chunk must be >= 1")
        if not 0.0 < val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in (0, 1)")
        self.model = model
        self.chunk = chunk
        self.spec = spec
        streams = _split_substreams(log_x, log_u, spec.batch_size)
        length = streams.x.shape[1]
        n_train = max(chunk + 1, int(np.floor((1.0 - val_fraction) * length)))
        if n_train + chunk + 1 > length:
            raise InsufficientDataError(
                "substreams too short for one train and one validation chunk")
        self.train_streams = _Substreams(x=streams.x[:, :n_train],
                                         u=streams.u[:, :n_train])
        self.val_streams = _Substreams(x=streams.x[:, n_train:],
                                       u=streams.u[:, n_train:])
        self.optimizer = Adam(model.params(), lr=spec.lr)
        self.scheduler = PlateauScheduler(self.optimizer, factor=spec.lr_factor,
                                          patience=spec.lr_patience,
                                          min_lr=spec.min_lr)
        self.epoch = 0
        self.best_val = np.inf
        self.best_weights: dict[str, np.ndarray] | None = None
        self.best_epoch = -1
        self.history: dict[str, list[float]] = {
            "train_loss": [], "val_loss": [], "lr": []}

    def _sweep(self, streams: _Substreams, update: bool) -> float:
        B, length = streams.x.shape[0], streams.x.shape[1]
        hidden = Hidden.zeros(self.model.arch, B)
        se_sum = 0.0
        n_elem = 0
        pos = 0
        while pos + self.chunk + 1 <= length:
            x = streams.x[:, pos:pos + self.chunk + 1]
            u = streams.u[:, pos:pos + self.chunk]
            if update:
                loss, grads, hidden = teacher_forced_loss_and_grads(
                    self.model, x, u, hidden)
                self.optimizer.step(grads)
            else:
                loss, hidden = teacher_forced_loss(self.model, x, u, hidden)
            n = x[:, 1:].size
            se_sum += loss * n
            n_elem += n
            pos += self.chunk
        if n_elem == 0:
            raise InsufficientDataError("no full chunk fits the substreams")
        return se_sum / n_elem

    def run_epoch(self) -> tuple[float, float]:
        train_loss = self._sweep(self.train_streams, update=True)
        val_loss = self._sweep(self.val_streams, update=False)
        self.scheduler.step(val_loss)
        if val_loss < self.best_val:
            self.best_val = val_loss
            self.best_weights = self.model.copy_weights()
            self.best_epoch = self.epoch
        self.history["train_loss"].append(train_loss)
        self.history["val_loss"].append(val_loss)
        self.history["lr"].append(self.optimizer.lr)
        self.epoch += 1
        return train_loss, val_loss

    def restore_best(self) -> None:
        if self.best_weights is not None:
            self.model.load_weights(self.best_weights)


def train_teacher_forced(model: RnnModel, log: SeriesLog | tuple, n_w: int,
                         n_p: int, spec: TrainSpec,
                         val_fraction: float = 0.3) -> dict[str, list[float]]:
    """Train the conventional baseline on a scaled series.

    The chunk length matches the window span used by the self-loop trainer
    (n_w + n_p + 1 steps) so both schemes see comparable backprop depth.
    """
    if isinstance(log, SeriesLog):
        x, u = log.x, log.u
    else:
        x, u = log
    trainer = TeacherForcedTrainer(model, x, u, chunk=n_w + n_p + 1, spec=spec,
                                   val_fraction=val_fraction)
    for _ in range(spec.epochs):
        trainer.run_epoch()
    trainer.restore_best()
    model.meta["best_epoch"] = trainer.best_epoch
    model.meta["best_val"] = trainer.best_val
    return trainer.history
