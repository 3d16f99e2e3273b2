"""Random-search hyperparameter optimization with asynchronous successive halving.

Trials sample configurations independently, train epoch by epoch, and face a
rank test at epoch milestones (rungs at grace * eta^j): a trial is promoted
only if its loss sits in the top 1/eta fraction of all losses recorded at that
rung so far, otherwise it stops. The rule is asynchronous: each decision uses
whatever losses have arrived at the rung by decision time, so early trials are
promoted on thin evidence and the rung population sharpens as the run goes on.

The scheduler here is a deterministic simulated worker pool: at most
``max_workers`` trials are active, admission is FIFO, and active trials
advance one epoch per round in admission order. Every event is appended to a
logical-time event log, which makes runs bit-reproducible and every stopping
decision replayable.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError
from .rnn import RnnArch, SelfLoopTrainer, TrainSpec, init_model

# ---------------------------------------------------------------------------
# search space
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IntRange:
    lo: int
    hi: int                      # inclusive

    def __post_init__(self):
        if self.lo > self.hi:
            raise ConfigError(f"empty integer range [{self.lo}, {self.hi}]")

    def sample(self, rng: np.random.Generator) -> int:
        return int(rng.integers(self.lo, self.hi + 1))


@dataclass(frozen=True)
class FloatRange:
    lo: float
    hi: float
    log: bool = False            # sample uniformly in log space

    def __post_init__(self):
        if not self.lo <= self.hi:
            raise ConfigError(f"empty range [{self.lo}, {self.hi}]")
        if self.log and self.lo <= 0:
            raise ConfigError("log-uniform range needs a positive lower bound")

    def sample(self, rng: np.random.Generator) -> float:
        if self.log:
            return float(np.exp(rng.uniform(np.log(self.lo), np.log(self.hi))))
        return float(rng.uniform(self.lo, self.hi))


@dataclass(frozen=True)
class SearchSpace:
    """Sampling ranges for the five tuned quantities."""

    hidden_dim: IntRange = IntRange(16, 96)
    num_layers: IntRange = IntRange(1, 3)
    batch_size: IntRange = IntRange(16, 128)
    dropout: FloatRange = FloatRange(0.0, 0.4)
    lr: FloatRange = FloatRange(1e-4, 1e-2, log=True)


@dataclass(frozen=True)
class TrialConfig:
    hidden_dim: int
    num_layers: int
    batch_size: int
    dropout: float
    lr: float

    def to_dict(self) -> dict:
        return {"hidden_dim": self.hidden_dim, "num_layers": self.num_layers,
                "batch_size": self.batch_size, "dropout": self.dropout,
                "lr": self.lr}


def sample_config(space: SearchSpace, seed) -> TrialConfig:
    """Draw one in-range configuration; deterministic for a given seed."""
    rng = np.random.default_rng(seed)
    return TrialConfig(hidden_dim=space.hidden_dim.sample(rng),
                       num_layers=space.num_layers.sample(rng),
                       batch_size=space.batch_size.sample(rng),
                       dropout=space.dropout.sample(rng),
                       lr=space.lr.sample(rng))


# ---------------------------------------------------------------------------
# trials and the halving rule
# ---------------------------------------------------------------------------

_STATUS_RANK = {"running": 0, "promoted": 1, "stopped": 2, "completed": 2}


@dataclass
class HpoTrial:
    trial_id: int
    config: TrialConfig
    seed: int
    status: str = "running"
    val_losses: list[float] = field(default_factory=list)
    rung: int = -1                       # highest rung index passed
    epochs_run: int = 0

    def record_loss(self, epoch: int, loss: float) -> None:
        if epoch != self.epochs_run + 1:
            raise ConfigError(
                f"trial {self.trial_id}: epoch {epoch} recorded out of order")
        self.val_losses.append(float(loss))
        self.epochs_run = epoch

    def advance_status(self, new: str) -> None:
        if new not in _STATUS_RANK:
            raise ConfigError(f"unknown status {new!r}")
        if _STATUS_RANK[new] < _STATUS_RANK[self.status] or \
                self.status in ("stopped", "completed"):
            raise ConfigError(
                f"trial {self.trial_id}: illegal transition "
                f"{self.status} -> {new}")
        self.status = new

    @property
    def best_loss(self) -> float:
        return min(self.val_losses) if self.val_losses else math.inf


@dataclass(frozen=True)
class AshaConfig:
    grace: int = 10              # epochs before the first stopping decision
    max_epochs: int = 30
    eta: float = 2.0             # reduction factor
    max_workers: int = 4
    budget: int = 16             # total number of trials

    def __post_init__(self):
        if self.budget < 1:
            raise ConfigError("trial budget must be >= 1")
        if not 1 <= self.grace <= self.max_epochs:
            raise ConfigError("need 1 <= grace <= max_epochs")
        if self.eta < 2.0:
            raise ConfigError("reduction factor must be >= 2")
        if self.max_workers < 1:
            raise ConfigError("need at least one worker")

    def rungs(self) -> list[int]:
        """Epoch milestones grace * eta^j, strictly below max_epochs."""
        out = []
        r = float(self.grace)
        while round(r) < self.max_epochs:
            out.append(int(round(r)))
            r *= self.eta
        return out


def asha_decide(trial: HpoTrial, rung_losses: dict[int, list[float]],
                cfg: AshaConfig) -> str:
    """Asynchronous halving decision for a trial at its current epoch count.

    Returns "continue" between milestones. At a milestone the trial's rung
    loss must already be recorded in ``rung_losses``; it is promoted iff its
    rank among all losses recorded at that rung so far is within the top
    1/eta fraction (never fewer than one slot, so the first arrival is
    promoted vacuously), and stopped otherwise.
    """
    rungs = cfg.rungs()
    if trial.epochs_run not in rungs:
        return "continue"
    losses = rung_losses[trial.epochs_run]
    own = trial.best_loss
    n = len(losses)
    k = max(1, math.floor(n / cfg.eta))
    rank = 1 + sum(1 for v in losses if v < own)
    return "promote" if rank <= k else "stop"


# ---------------------------------------------------------------------------
# deterministic scheduler
# ---------------------------------------------------------------------------

def trial_seeds(seed: int, trial_id: int) -> tuple[int, int]:
    """Independent (config seed, training seed) streams for one trial."""
    state = np.random.SeedSequence(entropy=[seed, trial_id]).generate_state(2)
    return int(state[0]), int(state[1])


def run_hpo(make_trainer: Callable, space: SearchSpace, cfg: AshaConfig,
            seed: int = 0):
    """Run the search with a simulated worker pool; fully deterministic.

    ``make_trainer(config, train_seed)`` must return an object exposing
    ``run_epoch() -> (train_loss, val_loss)``; the validation loss stream
    drives the halving decisions. Returns ``(best, trials, events, trainer)``
    where ``best`` is the completed trial with minimal validation MSE,
    ``events`` is the logical-time event log justifying every decision, and
    ``trainer`` is the best trial's trainer (it holds the trained model).
    """
    trials: list[HpoTrial] = []
    for i in range(cfg.budget):
        cfg_seed, train_seed = trial_seeds(seed, i)
        trials.append(HpoTrial(trial_id=i, config=sample_config(space, cfg_seed),
                               seed=train_seed))

    events: list[dict] = []
    clock = 0

    def log(event: str, trial: HpoTrial | None = None, **extra) -> None:
        nonlocal clock
        rec = {"t": clock, "event": event}
        if trial is not None:
            rec["trial"] = trial.trial_id
        rec.update(extra)
        events.append(rec)
        clock += 1

    rung_losses: dict[int, list[float]] = {r: [] for r in cfg.rungs()}
    pending = list(trials)
    active: list[tuple[HpoTrial, object]] = []
    trainers: dict[int, object] = {}

    log("run_start", budget=cfg.budget, grace=cfg.grace,
        max_epochs=cfg.max_epochs, eta=cfg.eta, max_workers=cfg.max_workers,
        rungs=cfg.rungs(), seed=seed)
    while pending or active:
        while pending and len(active) < cfg.max_workers:
            trial = pending.pop(0)
            trainer = make_trainer(trial.config, trial.seed)
            trainers[trial.trial_id] = trainer
            active.append((trial, trainer))
            log("admit", trial, config=trial.config.to_dict(),
                active=len(active))
        for trial, trainer in list(active):
            _, val_loss = trainer.run_epoch()
            trial.record_loss(trial.epochs_run + 1, val_loss)
            log("epoch", trial, epoch=trial.epochs_run, val_loss=val_loss,
                active=len(active))
            if trial.epochs_run in rung_losses:
                rung_losses[trial.epochs_run].append(trial.best_loss)
                n = len(rung_losses[trial.epochs_run])
                decision = asha_decide(trial, rung_losses, cfg)
                k = max(1, math.floor(n / cfg.eta))
                rank = 1 + sum(1 for v in rung_losses[trial.epochs_run]
                               if v < trial.best_loss)
                log(decision, trial, rung=trial.epochs_run,
                    loss=trial.best_loss, n_at_rung=n, rank=rank, top_k=k)
                if decision == "stop":
                    trial.advance_status("stopped")
                    active.remove((trial, trainer))
                    continue
                trial.rung = trial.epochs_run
                if trial.status == "running":
                    trial.advance_status("promoted")
            if trial.epochs_run >= cfg.max_epochs:
                trial.advance_status("completed")
                active.remove((trial, trainer))
                log("complete", trial, epochs=trial.epochs_run,
                    best_loss=trial.best_loss)
    log("run_end", total_epochs=sum(t.epochs_run for t in trials))

    completed = [t for t in trials if t.status == "completed"]
    if not completed:
        raise RuntimeError("no trial survived to max_epochs")
    best = min(completed, key=lambda t: t.best_loss)
    log("select", best, best_loss=best.best_loss)
    best_trainer = trainers[best.trial_id]
    return best, trials, events, best_trainer


# ---------------------------------------------------------------------------
# model-fitting front end and reporting
# ---------------------------------------------------------------------------

def run_hpo_rnn(space: SearchSpace, cfg: AshaConfig, cell: str,
                train_ds, val_ds, seed: int = 0, n_w: int | None = None,
                lr_patience: int = 5, out_dir: str | Path | None = None):
    """Search network/training hyperparameters for the self-loop trainer.

    Returns (best model with restored best weights, best trial, trials,
    events). When ``out_dir`` is given, writes the trials report CSV, the
    event log, and the winning model's checkpoint beneath it.
    """
    state_dim = train_ds.state_dim
    input_dim = train_ds.input_dim

    def make_trainer(config: TrialConfig, train_seed: int):
        arch = RnnArch(cell=cell, state_dim=state_dim, input_dim=input_dim,
                       hidden_dim=config.hidden_dim,
                       num_layers=config.num_layers,
                       dropout=config.dropout if config.num_layers > 1 else 0.0)
        model = init_model(arch, seed=train_seed)
        spec = TrainSpec(epochs=cfg.max_epochs, batch_size=config.batch_size,
                         lr=config.lr, lr_patience=lr_patience, seed=train_seed)
        return SelfLoopTrainer(model, train_ds, val_ds, spec)

    best, trials, events, best_trainer = run_hpo(make_trainer, space, cfg, seed)
    best_trainer.restore_best()
    model = best_trainer.model
    model.meta.update({"trial_id": best.trial_id, "config": best.config.to_dict(),
                       "best_val": best.best_loss})
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        export_trials_report(trials, out_dir / "trials.csv")
        export_event_log(events, out_dir / "events.json")
        from .rnn import save_checkpoint
        save_checkpoint(model, out_dir / "best_model",
                        history=best_trainer.history)
    return model, best, trials, events


def export_trials_report(trials: list[HpoTrial], path: str | Path) -> Path:
    """Per-trial CSV suitable for a parallel-coordinates plot."""
    path = Path(path)
    cols = ["trial", "status", "hidden_dim", "num_layers", "batch_size",
            "dropout", "lr", "epochs_run", "rung", "best_val_loss"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for t in trials:
            writer.writerow([t.trial_id, t.status, t.config.hidden_dim,
                             t.config.num_layers, t.config.batch_size,
                             repr(t.config.dropout), repr(t.config.lr),
                             t.epochs_run, t.rung,
                             repr(t.best_loss)])
    return path


def export_event_log(events: list[dict], path: str | Path) -> Path:
    import json
    path = Path(path)
    with open(path, "w") as fh:
        json.dump(events, fh, indent=1)
        fh.write("\n")
    return path


def replay_check_stops(events: list[dict], cfg: AshaConfig) -> None:
    """Re-derive every stop/promote decision from the event log alone.

    Raises AssertionError if any decision is inconsistent with the rung-rank
    rule or if any stop happened before the grace period; used by tests and
    the replay tooling.
    """
    rung_losses: dict[int, list[float]] = {r: [] for r in cfg.rungs()}
    active = 0
    for ev in events:
        if ev["event"] == "admit":
            active += 1
            assert ev["active"] <= cfg.max_workers, "worker bound exceeded"
        elif ev["event"] in ("stop", "promote"):
            rung = ev["rung"]
            assert rung >= cfg.grace, f"decision before grace at epoch {rung}"
            rung_losses[rung].append(ev["loss"])
            n = len(rung_losses[rung])
            assert n == ev["n_at_rung"], "rung population mismatch on replay"
            k = max(1, math.floor(n / cfg.eta))
            rank = 1 + sum(1 for v in rung_losses[rung] if v < ev["loss"])
            expected = "promote" if rank <= k else "stop"
            assert ev["event"] == expected, (
                f"decision {ev['event']} at rung {rung} contradicts replayed "
                f"rank {rank}/{n} (top {k})")
