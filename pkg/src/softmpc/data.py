"""Dataset generation and conditioning for recurrent model training.

The pipeline is: excite the plant and log raw series at the actuation rate,
estimate velocities from filtered encoder positions, downsample to the model
rate, scale every channel to [-1, 1], cut warm-up/prediction windows, and
split them into contiguous train/validation blocks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    DegenerateChannelError,
    DimensionMismatchError,
    IncompatibleRateError,
    InsufficientDataError,
    SeriesTooShortError,
)


@dataclass
class SeriesLog:
    """Uniformly sampled multichannel time series.

    ``x`` holds the state channels (positions, optionally velocities) and
    ``u`` the actuation channels; ``extras`` carries auxiliary columns such as
    measured pressures that ride along through persistence but are not used
    for training.
    """

    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    rate: float
    x_names: list[str]
    u_names: list[str]
    extras: dict[str, np.ndarray] = field(default_factory=dict)
    source_id: str = ""

    def __post_init__(self) -> None:
        self.t = np.asarray(self.t, dtype=float)
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.u = np.atleast_2d(np.asarray(self.u, dtype=float))
        n = self.t.shape[0]
        if self.x.shape[0] != n or self.u.shape[0] != n:
            raise DimensionMismatchError("t, x and u must share the sample count")
        if len(self.x_names) != self.x.shape[1] or len(self.u_names) != self.u.shape[1]:
            raise DimensionMismatchError("channel name lists must match column counts")
        if self.rate <= 0.0:
            raise ConfigError("rate must be positive")
        if n >= 2:
            dt = np.diff(self.t)
            if np.any(dt <= 0.0):
                raise ConfigError("timestamps must be strictly increasing")
            if not np.allclose(dt, 1.0 / self.rate, rtol=0.0, atol=1e-9 / self.rate):
                raise ConfigError("timestamps must be uniform at 1/rate")
        for name, col in self.extras.items():
            if np.asarray(col).shape != (n,):
                raise DimensionMismatchError(f"extra column {name!r} has wrong length")

    def __len__(self) -> int:
        return self.t.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.rate

    def save_csv(self, path: str) -> None:
        """Write one CSV plus a JSON sidecar holding rate and channel roles."""
        cols = [self.t] + [self.x[:, i] for i in range(self.x.shape[1])] \
            + [self.u[:, i] for i in range(self.u.shape[1])] \
            + [np.asarray(self.extras[k], dtype=float) for k in sorted(self.extras)]
        names = ["t"] + self.x_names + self.u_names + sorted(self.extras)
        with open(path, "w") as f:
            f.write(",".join(names) + "\n")
            for row in zip(*cols):
                f.write(",".join(repr(float(v)) for v in row) + "\n")
        sidecar = {
            "rate": self.rate,
            "x_names": self.x_names,
            "u_names": self.u_names,
            "extra_names": sorted(self.extras),
            "source_id": self.source_id,
        }
        with open(path + ".json", "w") as f:
            json.dump(sidecar, f, indent=1)

    @classmethod
    def load_csv(cls, path: str) -> "SeriesLog":
        with open(path + ".json") as f:
            meta = json.load(f)
        with open(path) as f:
            header = f.readline().strip().split(",")
            rows = [line.strip().split(",") for line in f if line.strip()]
        data = {name: np.array([float(r[i]) for r in rows]) for i, name in enumerate(header)}
        return cls(
            t=data["t"],
            x=np.column_stack([data[n] for n in meta["x_names"]]) if meta["x_names"]
            else np.zeros((len(data["t"]), 0)),
            u=np.column_stack([data[n] for n in meta["u_names"]]),
            rate=meta["rate"],
            x_names=meta["x_names"],
            u_names=meta["u_names"],
            extras={n: data[n] for n in meta["extra_names"]},
            source_id=meta.get("source_id", ""),
        )

    def save_binary(self, path: str) -> None:
        """Little-endian float64 blob (t, x, u, extras column-wise) + JSON sidecar."""
        parts = [self.t, *(self.x[:, i] for i in range(self.x.shape[1])),
                 *(self.u[:, i] for i in range(self.u.shape[1])),
                 *(np.asarray(self.extras[k], dtype=float) for k in sorted(self.extras))]
        blob = np.concatenate(parts).astype("<f8")
        blob.tofile(path)
        sidecar = {
            "n_samples": len(self),
            "rate": self.rate,
            "x_names": self.x_names,
            "u_names": self.u_names,
            "extra_names": sorted(self.extras),
            "source_id": self.source_id,
            "dtype": "<f8",
        }
        with open(path + ".json", "w") as f:
            json.dump(sidecar, f, indent=1)

    @classmethod
    def load_binary(cls, path: str) -> "SeriesLog":
        with open(path + ".json") as f:
            meta = json.load(f)
        n = meta["n_samples"]
        blob = np.fromfile(path, dtype="<f8")
        names = ["t"] + meta["x_names"] + meta["u_names"] + meta["extra_names"]
        if blob.shape[0] != n * len(names):
            raise ConfigError(f"binary log {path} does not match its sidecar")
        cols = {name: blob[i * n:(i + 1) * n].astype(float) for i, name in enumerate(names)}
        return cls(
            t=cols["t"],
            x=np.column_stack([cols[c] for c in meta["x_names"]]) if meta["x_names"]
            else np.zeros((n, 0)),
            u=np.column_stack([cols[c] for c in meta["u_names"]]),
            rate=meta["rate"],
            x_names=meta["x_names"],
            u_names=meta["u_names"],
            extras={c: cols[c] for c in meta["extra_names"]},
            source_id=meta.get("source_id", ""),
        )


# ---------------------------------------------------------------------------
# excitation schedules
# ---------------------------------------------------------------------------

def gen_step_excitation(n_joints: int, hold: float, duration: float, p_max: float,
                        seed: int, rate: float = 1000.0) -> tuple[np.ndarray, np.ndarray]:
    """Piecewise-constant random pressure commands.

    Every bellows gets an independent uniform draw in [0, p_max] per plateau;
    plateaus last ``hold`` seconds and ``duration`` must be a whole number of
    plateaus. Returns (t, u) sampled at ``rate``.
    """
    if hold <= 0.0 or p_max <= 0.0 or n_joints < 1:
        raise ConfigError("hold, p_max and n_joints must be positive")
    n_seg_f = duration / hold
    n_seg = int(round(n_seg_f))
    if n_seg < 1 or abs(n_seg - n_seg_f) > 1e-9:
        raise ConfigError("duration must be a positive integer multiple of hold")
    per_seg = int(round(hold * rate))
    if per_seg < 1 or abs(per_seg - hold * rate) > 1e-6:
        raise ConfigError("hold must be a whole number of samples at the given rate")
    rng = np.random.default_rng(seed)
    levels = rng.uniform(0.0, p_max, size=(n_seg, 2 * n_joints))
    u = np.repeat(levels, per_seg, axis=0)
    t = np.arange(u.shape[0]) / rate
    return t, u


def gen_ramp_excitation(n_joints: int, ramp: float, hold: float, duration: float,
                        p_max: float, seed: int, rate: float = 1000.0
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Random setpoints reached by linear ramps and held between transitions.

    Each segment lasts ``ramp + hold`` seconds: a linear move from the previous
    level to a fresh uniform draw, then a plateau. Commands start at the first
    draw. Consecutive samples never jump by more than p_max * dt / ramp.
    """
    if ramp <= 0.0 or hold < 0.0 or p_max <= 0.0 or n_joints < 1:
        raise ConfigError("ramp and p_max must be positive, hold >= 0")
    seg = ramp + hold
    n_seg_f = duration / seg
    n_seg = int(round(n_seg_f))
    if n_seg < 1 or abs(n_seg - n_seg_f) > 1e-9:
        raise ConfigError("duration must be a positive integer multiple of ramp + hold")
    n_ramp = int(round(ramp * rate))
    n_hold = int(round(hold * rate))
    if n_ramp < 1 or abs(n_ramp - ramp * rate) > 1e-6 or abs(n_hold - hold * rate) > 1e-6:
        raise ConfigError("ramp and hold must be whole numbers of samples at the given rate")
    rng = np.random.default_rng(seed)
    levels = rng.uniform(0.0, p_max, size=(n_seg + 1, 2 * n_joints))
    chunks = []
    for s in range(n_seg):
        frac = (np.arange(n_ramp) + 1.0) / n_ramp
        ramp_part = levels[s][None, :] + frac[:, None] * (levels[s + 1] - levels[s])[None, :]
        hold_part = np.repeat(levels[s + 1][None, :], n_hold, axis=0)
        chunks.append(np.vstack([ramp_part, hold_part]))
    u = np.vstack(chunks)
    t = np.arange(u.shape[0]) / rate
    return t, u


# ---------------------------------------------------------------------------
# conditioning
# ---------------------------------------------------------------------------

def estimate_velocity(q: np.ndarray, rate: float, cutoff: float = 5.0) -> np.ndarray:
    """First-order low-pass at ``cutoff`` Hz followed by central differences.

    ``q`` is (n,) or (n, m); the boundary samples use one-sided differences.
    """
    q = np.asarray(q, dtype=float)
    squeeze = q.ndim == 1
    q2 = q[:, None] if squeeze else q
    n = q2.shape[0]
    if n < 3:
        raise SeriesTooShortError("velocity estimation needs at least 3 samples")
    if cutoff <= 0.0 or rate <= 0.0:
        raise ConfigError("cutoff and rate must be positive")
    tau = 1.0 / (2.0 * np.pi * cutoff)
    dt = 1.0 / rate
    a = dt / (tau + dt)
    filt = np.empty_like(q2)
    filt[0] = q2[0]
    for k in range(1, n):
        filt[k] = filt[k - 1] + a * (q2[k] - filt[k - 1])
    v = np.empty_like(filt)
    v[1:-1] = (filt[2:] - filt[:-2]) * (rate / 2.0)
    v[0] = (filt[1] - filt[0]) * rate
    v[-1] = (filt[-1] - filt[-2]) * rate
    return v[:, 0] if squeeze else v


def add_velocity_states(log: SeriesLog, cutoff: float = 5.0) -> SeriesLog:
    """Extend a position-only log with estimated velocity channels (deg/s)."""
    vel = estimate_velocity(log.x, log.rate, cutoff)
    return SeriesLog(
        t=log.t.copy(),
        x=np.hstack([log.x, vel]),
        u=log.u.copy(),
        rate=log.rate,
        x_names=log.x_names + [n + "d" for n in log.x_names],
        u_names=list(log.u_names),
        extras={k: v.copy() for k, v in log.extras.items()},
        source_id=log.source_id,
    )


def downsample(log: SeriesLog, target: float) -> SeriesLog:
    """Keep every (rate/target)-th sample; values are carried over exactly."""
    factor_f = log.rate / target
    factor = int(round(factor_f))
    if factor < 1 or abs(factor - factor_f) > 1e-9:
        raise IncompatibleRateError(
            f"rate {log.rate} is not an integer multiple of target {target}")
    if factor == 1:
        keep = slice(None)
    else:
        keep = slice(0, None, factor)
    return SeriesLog(
        t=log.t[keep].copy(),
        x=log.x[keep].copy(),
        u=log.u[keep].copy(),
        rate=target,
        x_names=list(log.x_names),
        u_names=list(log.u_names),
        extras={k: np.asarray(v)[keep].copy() for k, v in log.extras.items()},
        source_id=log.source_id,
    )


# ---------------------------------------------------------------------------
# scaling
# ---------------------------------------------------------------------------

@dataclass
class Scaler:
    """Per-channel affine map onto [-1, 1]: s = 2 (v - lo) / (hi - lo) - 1."""

    x_lo: np.ndarray
    x_hi: np.ndarray
    u_lo: np.ndarray
    u_hi: np.ndarray
    x_names: list[str]
    u_names: list[str]

    @staticmethod
    def _forward(v, lo, hi):
        return 2.0 * (v - lo) / (hi - lo) - 1.0

    @staticmethod
    def _inverse(s, lo, hi):
        return (s + 1.0) * 0.5 * (hi - lo) + lo

    def scale_x(self, v: np.ndarray) -> np.ndarray:
        return self._forward(np.asarray(v, dtype=float), self.x_lo, self.x_hi)

    def scale_u(self, v: np.ndarray) -> np.ndarray:
        return self._forward(np.asarray(v, dtype=float), self.u_lo, self.u_hi)

    def unscale_x(self, s: np.ndarray) -> np.ndarray:
        return self._inverse(np.asarray(s, dtype=float), self.x_lo, self.x_hi)

    def unscale_u(self, s: np.ndarray) -> np.ndarray:
        return self._inverse(np.asarray(s, dtype=float), self.u_lo, self.u_hi)

    def scale_log(self, log: SeriesLog) -> SeriesLog:
        if log.x_names != self.x_names or log.u_names != self.u_names:
            raise DimensionMismatchError("log channels do not match the scaler")
        return SeriesLog(t=log.t.copy(), x=self.scale_x(log.x), u=self.scale_u(log.u),
                         rate=log.rate, x_names=list(log.x_names), u_names=list(log.u_names),
                         extras={k: v.copy() for k, v in log.extras.items()},
                         source_id=log.source_id)

    def to_dict(self) -> dict:
        return {
            "x_lo": self.x_lo.tolist(), "x_hi": self.x_hi.tolist(),
            "u_lo": self.u_lo.tolist(), "u_hi": self.u_hi.tolist(),
            "x_names": self.x_names, "u_names": self.u_names,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(x_lo=np.array(d["x_lo"], dtype=float), x_hi=np.array(d["x_hi"], dtype=float),
                   u_lo=np.array(d["u_lo"], dtype=float), u_hi=np.array(d["u_hi"], dtype=float),
                   x_names=list(d["x_names"]), u_names=list(d["u_names"]))


def fit_scaler(logs: SeriesLog | list[SeriesLog],
               u_range: tuple[float, float] | None = None) -> Scaler:
    """Per-channel minima/maxima over all provided logs.

    State channels always use observed extrema. Input channels do too by
    default, but commands usually have a known actuation range; passing
    ``u_range`` pins every input channel to it (so, e.g., the same pressure
    maps to the same scaled value on every channel). Data outside the claimed
    range is rejected. Raises DegenerateChannelError when a channel is
    constant, since the min-max map would be singular there.
    """
    if isinstance(logs, SeriesLog):
        logs = [logs]
    if not logs:
        raise InsufficientDataError("fit_scaler needs at least one log")
    first = logs[0]
    for lg in logs[1:]:
        if lg.x_names != first.x_names or lg.u_names != first.u_names:
            raise DimensionMismatchError("all logs must share the channel layout")
    x_all = np.vstack([lg.x for lg in logs])
    u_all = np.vstack([lg.u for lg in logs])
    x_lo, x_hi = x_all.min(axis=0), x_all.max(axis=0)
    u_lo, u_hi = u_all.min(axis=0), u_all.max(axis=0)
    if u_range is not None:
        lo, hi = float(u_range[0]), float(u_range[1])
        if not lo < hi:
            raise ConfigError("u_range must be ordered")
        if u_all.size and (u_all.min() < lo or u_all.max() > hi):
            raise ConfigError("input data falls outside the declared u_range")
        u_lo = np.full(u_all.shape[1], lo)
        u_hi = np.full(u_all.shape[1], hi)
    for names, lo, hi in ((first.x_names, x_lo, x_hi), (first.u_names, u_lo, u_hi)):
        bad = np.nonzero(hi - lo <= 0.0)[0]
        if bad.size:
            raise DegenerateChannelError(
                f"constant channel(s): {[names[i] for i in bad]}")
    return Scaler(x_lo=x_lo, x_hi=x_hi, u_lo=u_lo, u_hi=u_hi,
                  x_names=list(first.x_names), u_names=list(first.u_names))


# ---------------------------------------------------------------------------
# windowing
# ---------------------------------------------------------------------------

@dataclass
class WindowedDataset:
    """Warm-up/prediction windows cut from scaled series.

    Per window: ``x``/``u`` hold n_w + n_p + 1 steps; the model is warmed on
    the first n_w steps with measured states, seeded with the state at step
    n_w, and then predicts n_p + 1 steps whose ground truth is ``y`` (the
    states at window positions n_w+1 ... n_w+n_p+1, the last of which is the
    one-step-ahead sample just past the stored input window).
    """

    x: np.ndarray            # (n_win, n_w + n_p + 1, dx)
    u: np.ndarray            # (n_win, n_w + n_p + 1, du)
    y: np.ndarray            # (n_win, n_p + 1, dx)
    n_w: int
    n_p: int
    offsets: np.ndarray      # (n_win,) start index within the source log
    source_id: str = ""

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def state_dim(self) -> int:
        return self.x.shape[2]

    @property
    def input_dim(self) -> int:
        return self.u.shape[2]

    def target_ranges(self) -> np.ndarray:
        """(n_win, 2) inclusive source-index range covered by each target block."""
        start = self.offsets + self.n_w + 1
        return np.stack([start, start + self.n_p], axis=1)

    def subset(self, idx: np.ndarray) -> "WindowedDataset":
        return WindowedDataset(x=self.x[idx], u=self.u[idx], y=self.y[idx],
                               n_w=self.n_w, n_p=self.n_p, offsets=self.offsets[idx],
                               source_id=self.source_id)


def make_sequences(log: SeriesLog, n_w: int, n_p: int,
                   stride: int | None = None) -> WindowedDataset:
    """Cut a scaled log into warm-up/prediction windows.

    Each window consumes n_w + n_p + 2 consecutive source samples: an input
    window of n_w + n_p + 1 steps plus the one-step-ahead target of the final
    prediction. The default stride of n_p + 1 makes consecutive windows'
    target blocks tile the log without overlap.
    """
    if n_w < 1 or n_p < 0:
        raise ConfigError("need n_w >= 1 and n_p >= 0")
    stride = n_p + 1 if stride is None else stride
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    n_s = len(log)
    span = n_w + n_p + 2
    if n_s < span:
        raise InsufficientDataError(
            f"need at least {span} samples for one window, got {n_s}")
    offsets = np.arange(0, n_s - span + 1, stride)
    win_len = n_w + n_p + 1
    x = np.stack([log.x[o:o + win_len] for o in offsets])
    u = np.stack([log.u[o:o + win_len] for o in offsets])
    y = np.stack([log.x[o + n_w + 1:o + n_w + n_p + 2] for o in offsets])
    return WindowedDataset(x=x, u=u, y=y, n_w=n_w, n_p=n_p,
                           offsets=offsets, source_id=log.source_id)


def split_windows(ds: WindowedDataset, train_fraction: float,
                  seed: int = 0) -> tuple[WindowedDataset, WindowedDataset]:
    """Contiguous-block split by source time: the first floor(f * n) windows
    (clamped so both sides are non-empty) train, the rest validate.

    Deterministic; the seed argument is kept for interface stability but the
    block split needs no randomness.
    """
    del seed
    n = len(ds)
    if n < 2:
        raise InsufficientDataError("need at least 2 windows to split")
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError("train_fraction must lie strictly between 0 and 1")
    n_train = int(np.floor(train_fraction * n))
    n_train = max(1, min(n - 1, n_train))
    order = np.argsort(ds.offsets, kind="stable")
    return ds.subset(order[:n_train]), ds.subset(order[n_train:])
