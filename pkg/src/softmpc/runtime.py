"""Closed-loop experiments, PI baseline and evaluation protocols.

The plant integrates at its own fine step while controllers act at their
control rate (zero-order hold in between). Logs store joint angles in degrees
and pressures in bar; scaled units stay inside the models and the optimizer.
Nothing in this module reads the wall clock, so identical seeds reproduce
every artifact byte for byte.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import SeriesLog, gen_ramp_excitation
from .errors import ConfigError, DimensionMismatchError, InsufficientDataError
from .nmpc import NmpcController, OcpSpec
from .plant import (BoucWenParams, PlantParams, plant_init, plant_measure,
                    plant_step)
from .rnn.checkpoint import load_checkpoint
from .rnn.model import Hidden, head_forward, rollout, step_stack


# ---------------------------------------------------------------------------
# trajectory logs
# ---------------------------------------------------------------------------

_STAT_COLS = ("cost", "iterations", "grad_inf", "converged", "fallback")


@dataclass
class TrajectoryLog:
    """Per-cycle record of one closed-loop run.

    ``ref`` rows are NaN while a receding-horizon controller is still warming
    up its hidden state (nothing is tracked there); ``eval_start`` marks the
    first cycle that counts toward tracking metrics. ``meta`` must stay
    JSON-serializable and carry everything needed to reproduce the run
    (controller kind and parameters, plant parameters, seeds, reference
    recipe). Wall-clock timings are deliberately absent so digests of saved
    logs are reproducible.
    """

    t: np.ndarray            # (n,) cycle times [s]
    ref: np.ndarray          # (n, n_joints) reference [deg]
    q: np.ndarray            # (n, n_joints) measured angles [deg]
    u: np.ndarray            # (n, 2*n_joints) applied pressures [bar]
    cost: np.ndarray         # (n,) solver cost (NaN for PI / warm-up)
    iterations: np.ndarray   # (n,) solver iterations
    grad_inf: np.ndarray     # (n,) stationarity measure
    converged: np.ndarray    # (n,) 1.0 if the solve hit its tolerance
    fallback: np.ndarray     # (n,) 1.0 if the cycle held the previous input
    rate: float              # control rate [Hz]
    eval_start: int          # first cycle of the evaluation interval
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.t = np.asarray(self.t, dtype=float)
        self.ref = np.atleast_2d(np.asarray(self.ref, dtype=float))
        self.q = np.atleast_2d(np.asarray(self.q, dtype=float))
        self.u = np.atleast_2d(np.asarray(self.u, dtype=float))
        for name in _STAT_COLS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        n = self.t.shape[0]
        if self.ref.shape[0] != n or self.q.shape[0] != n or self.u.shape[0] != n:
            raise DimensionMismatchError("per-cycle arrays must share the cycle count")
        if self.ref.shape != self.q.shape:
            raise DimensionMismatchError("ref and q must share the channel layout")
        for name in _STAT_COLS:
            if getattr(self, name).shape != (n,):
                raise DimensionMismatchError(f"column {name} must have shape ({n},)")
        if self.rate <= 0.0:
            raise ConfigError("rate must be positive")
        if n >= 2 and not np.allclose(np.diff(self.t), 1.0 / self.rate,
                                      rtol=0.0, atol=1e-9 / self.rate):
            raise ConfigError("cycles must be uniformly spaced at the control period")
        if not 0 <= self.eval_start <= n:
            raise ConfigError("eval_start must lie within the log")

    def __len__(self) -> int:
        return self.t.shape[0]

    @property
    def n_joints(self) -> int:
        return self.ref.shape[1]

    def _column_names(self) -> list[str]:
        n, du = self.n_joints, self.u.shape[1]
        return (["t"] + [f"ref{i}" for i in range(n)] + [f"q{i}" for i in range(n)]
                + [f"u{j}" for j in range(du)] + list(_STAT_COLS))

    def to_csv_text(self) -> str:
        cols = [self.t] + [self.ref[:, i] for i in range(self.n_joints)] \
            + [self.q[:, i] for i in range(self.n_joints)] \
            + [self.u[:, j] for j in range(self.u.shape[1])] \
            + [getattr(self, name) for name in _STAT_COLS]
        lines = [",".join(self._column_names())]
        for row in zip(*cols):
            lines.append(",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"

    def _sidecar(self) -> dict:
        return {"rate": self.rate, "eval_start": int(self.eval_start),
                "n_cycles": len(self), "n_joints": self.n_joints,
                "n_inputs": self.u.shape[1], "meta": self.meta}

    def save(self, path: str) -> None:
        """Write one CSV plus a JSON sidecar with rate, interval and metadata."""
        with open(path, "w") as f:
            f.write(self.to_csv_text())
        with open(path + ".json", "w") as f:
            json.dump(self._sidecar(), f, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path: str) -> "TrajectoryLog":
        with open(path + ".json") as f:
            side = json.load(f)
        with open(path) as f:
            header = f.readline().strip().split(",")
            rows = [line.strip().split(",") for line in f if line.strip()]
        data = {name: np.array([float(r[i]) for r in rows])
                for i, name in enumerate(header)}
        n, du = side["n_joints"], side["n_inputs"]
        return cls(
            t=data["t"],
            ref=np.column_stack([data[f"ref{i}"] for i in range(n)]),
            q=np.column_stack([data[f"q{i}"] for i in range(n)]),
            u=np.column_stack([data[f"u{j}"] for j in range(du)]),
            cost=data["cost"], iterations=data["iterations"],
            grad_inf=data["grad_inf"], converged=data["converged"],
            fallback=data["fallback"], rate=side["rate"],
            eval_start=side["eval_start"], meta=side["meta"],
        )

    def digest(self) -> str:
        """SHA-256 over the exact bytes `save` would produce."""
        body = self.to_csv_text() + json.dumps(self._sidecar(), sort_keys=True)
        return hashlib.sha256(body.encode()).hexdigest()


def compute_rmse(log: TrajectoryLog, interval: tuple[int, int] | None = None
                 ) -> np.ndarray:
    """Per-joint RMS tracking error (deg) over the cycle range [start, stop).

    Defaults to the log's evaluation interval. Raises if the range is empty
    or touches warm-up cycles that carry no reference.
    """
    n = len(log)
    start, stop = (log.eval_start, n) if interval is None else interval
    if not (0 <= start < stop <= n):
        raise InsufficientDataError(f"empty or out-of-range interval [{start}, {stop})")
    err = log.ref[start:stop] - log.q[start:stop]
    if not np.all(np.isfinite(err)):
        raise ConfigError("interval includes cycles without a reference")
    return np.sqrt(np.mean(err * err, axis=0))


# ---------------------------------------------------------------------------
# reference generation and data collection
# ---------------------------------------------------------------------------

def gen_reference(n_joints: int, duration: float, seed: int, rate: float = 5.0,
                  angle_limit: float = 20.0, margin: float = 0.85,
                  ramp_range: tuple[float, float] = (1.0, 3.0),
                  hold_range: tuple[float, float] = (0.5, 2.0)
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Simultaneous random ramp-and-hold joint reference in degrees.

    All joints ramp at the same times, each toward its own uniform target
    within +-margin*angle_limit, and hold between moves. The knot sequence
    depends only on the seed, never on the sampling rate, so the same seed
    yields consistent references at 5 Hz and at 1 kHz. Returns (t, ref) with
    ref of shape (round(duration*rate), n_joints).
    """
    if n_joints < 1:
        raise ConfigError("n_joints must be >= 1")
    if duration < 0.0:
        raise ConfigError("duration must be >= 0")
    if rate <= 0.0:
        raise ConfigError("rate must be positive")
    if not 0.0 < margin <= 1.0:
        raise ConfigError("margin must lie in (0, 1]")
    if ramp_range[0] <= 0.0 or ramp_range[1] < ramp_range[0] \
            or hold_range[0] < 0.0 or hold_range[1] < hold_range[0]:
        raise ConfigError("ramp_range and hold_range must be ordered and positive")
    n = int(round(duration * rate))
    if n == 0:
        return np.zeros(0), np.zeros((0, n_joints))
    rng = np.random.default_rng(seed)
    amp = margin * angle_limit
    knot_t = [0.0]
    knot_v = [np.zeros(n_joints)]
    t_end = 0.0
    while t_end < duration:
        ramp = rng.uniform(*ramp_range)
        hold = rng.uniform(*hold_range)
        target = rng.uniform(-amp, amp, size=n_joints)
        knot_t += [t_end + ramp, t_end + ramp + hold]
        knot_v += [target, target]
        t_end += ramp + hold
    kt = np.asarray(knot_t)
    kv = np.stack(knot_v)
    t = np.arange(n) / rate
    ref = np.column_stack([np.interp(t, kt, kv[:, j]) for j in range(n_joints)])
    return t, ref


def collect_log(params: PlantParams, u_cmd: np.ndarray, rate: float | None = None,
                seed: int = 0, source_id: str = "") -> SeriesLog:
    """Drive the plant with a pressure-command schedule and record the encoder.

    Row k of ``u_cmd`` is held for one sample period and paired with the
    measurement taken at the same instant, so (x_k, u_k) -> x_{k+1} matches
    the windowing convention downstream. ``rate`` defaults to the simulation
    rate.
    """
    rate = 1.0 / params.sim_dt if rate is None else rate
    u_cmd = np.atleast_2d(np.asarray(u_cmd, dtype=float))
    n_j = params.n_joints
    if u_cmd.shape[1] != 2 * n_j:
        raise DimensionMismatchError(
            f"u_cmd must have {2 * n_j} columns, got {u_cmd.shape[1]}")
    n = u_cmd.shape[0]
    if n < 1:
        raise InsufficientDataError("u_cmd is empty")
    period = 1.0 / rate
    rng = np.random.default_rng([seed, 1])
    state = plant_init(params)
    q_rows = np.empty((n, n_j))
    for k in range(n):
        meas = plant_measure(state, params, rng)
        q_rows[k] = meas.q_meas
        state = plant_step(state, u_cmd[k], period, params)
    return SeriesLog(t=np.arange(n) / rate, x=q_rows, u=u_cmd.copy(), rate=rate,
                     x_names=[f"q{i}" for i in range(n_j)],
                     u_names=[f"u{j}" for j in range(2 * n_j)],
                     source_id=source_id)


# ---------------------------------------------------------------------------
# PI baseline
# ---------------------------------------------------------------------------

class PiController:
    """Decentralized joint-space PI producing antagonistic pressure pairs.

    Per joint the tracking error (deg) feeds d = kp*e + ki*integral(e); the
    bellows pair is commanded as (u_mean + d/2, u_mean - d/2), clipped to
    [0, p_range]. The integrator only accumulates while the differential
    command is unsaturated or the error pushes back toward the admissible
    range (conditional anti-windup).
    """

    def __init__(self, n_joints: int, kp, ki, u_mean: float = 0.35,
                 p_range: float = 0.7, rate: float = 1000.0):
        if n_joints < 1:
            raise ConfigError("n_joints must be >= 1")
        self.kp = np.broadcast_to(np.asarray(kp, dtype=float), (n_joints,)).copy()
        self.ki = np.broadcast_to(np.asarray(ki, dtype=float), (n_joints,)).copy()
        if np.any(self.kp < 0.0) or np.any(self.ki < 0.0):
            raise ConfigError("gains must be >= 0")
        if not 0.0 < u_mean < p_range:
            raise ConfigError("need 0 < u_mean < p_range")
        if rate <= 0.0:
            raise ConfigError("rate must be positive")
        self.n_joints = n_joints
        self.u_mean = float(u_mean)
        self.p_range = float(p_range)
        self.rate = float(rate)
        self.integ = np.zeros(n_joints)

    def reset(self) -> None:
        self.integ[:] = 0.0

    def step(self, q_meas: np.ndarray, ref: np.ndarray) -> np.ndarray:
        """One control period: measured and desired angles (deg) in, pressures out."""
        q = np.asarray(q_meas, dtype=float)
        r = np.asarray(ref, dtype=float)
        if q.shape != (self.n_joints,) or r.shape != (self.n_joints,):
            raise DimensionMismatchError(
                f"q_meas and ref must have shape ({self.n_joints},)")
        e = r - q
        cand = self.integ + e / self.rate
        d_raw = self.kp * e + self.ki * cand
        lo = -2.0 * self.u_mean
        hi = 2.0 * (self.p_range - self.u_mean)
        d = np.clip(d_raw, lo, hi)
        windup = ((d_raw > hi) & (e > 0.0)) | ((d_raw < lo) & (e < 0.0))
        self.integ = np.where(windup, self.integ, cand)
        u = np.empty(2 * self.n_joints)
        u[0::2] = self.u_mean + 0.5 * d
        u[1::2] = self.u_mean - 0.5 * d
        return np.clip(u, 0.0, self.p_range)

    def to_meta(self) -> dict:
        return {"n_joints": self.n_joints, "kp": self.kp.tolist(),
                "ki": self.ki.tolist(), "u_mean": self.u_mean,
                "p_range": self.p_range, "rate": self.rate}


# ---------------------------------------------------------------------------
# closed loop
# ---------------------------------------------------------------------------

def _warmup_excitation(n_joints: int, n_cycles: int, rate: float,
                       center: np.ndarray, amplitude: float, seed: int
                       ) -> np.ndarray:
    """Low-amplitude ramp-and-hold schedule around the stiffness pressure."""
    n_ramp = max(1, int(round(1.6 * rate)))
    n_hold = max(1, int(round(0.4 * rate)))
    seg = (n_ramp + n_hold) / rate
    n_seg = int(np.ceil(n_cycles / (n_ramp + n_hold)))
    _, u = gen_ramp_excitation(n_joints, ramp=n_ramp / rate, hold=n_hold / rate,
                               duration=n_seg * seg, p_max=2.0 * amplitude,
                               seed=seed, rate=rate)
    return u[:n_cycles] + (center - amplitude)[None, :]


def run_closed_loop(params: PlantParams, controller, reference: np.ndarray,
                    warmup: float = 0.0, seed: int = 0,
                    excitation_amplitude: float = 0.08,
                    extra_meta: dict | None = None) -> TrajectoryLog:
    """Track ``reference`` with an NMPC or PI controller on the surrogate plant.

    ``reference`` is (n_cycles, n_joints) in degrees, sampled at the
    controller's rate. For the receding-horizon controller the first
    ``warmup`` seconds drive the plant with a gentle ramp excitation around
    the stiffness pressure while only the hidden state is updated (no
    tracking); the PI baseline instead regulates at zero for the same span.
    Warm-up cycles are logged (reference NaN for the excitation phase) and
    excluded from the evaluation interval. Controller faults fall back to
    holding the previous input and are flagged in the log.
    """
    reference = np.atleast_2d(np.asarray(reference, dtype=float))
    if reference.shape[1] != params.n_joints:
        raise DimensionMismatchError(
            f"reference must have {params.n_joints} columns")
    if warmup < 0.0:
        raise ConfigError("warmup must be >= 0")
    if isinstance(controller, NmpcController):
        return _run_nmpc(params, controller, reference, warmup, seed,
                         excitation_amplitude, extra_meta)
    if isinstance(controller, PiController):
        return _run_pi(params, controller, reference, warmup, seed, extra_meta)
    raise ConfigError("controller must be an NmpcController or a PiController")


def _whole_cycles(warmup: float, rate: float) -> int:
    n = int(round(warmup * rate))
    if abs(n - warmup * rate) > 1e-9:
        raise ConfigError("warmup must be a whole number of control periods")
    return n


def _run_nmpc(params, ctrl, reference, warmup, seed, amplitude, extra_meta):
    n_j = params.n_joints
    if ctrl.model.arch.state_dim != n_j or ctrl.model.arch.input_dim != 2 * n_j:
        raise DimensionMismatchError("model dimensions do not match the plant")
    spec = ctrl.spec
    rate = spec.control_rate
    period = 1.0 / rate
    n_warm = _whole_cycles(warmup, rate)
    n_ref = reference.shape[0]
    n_cycles = n_warm + n_ref
    rng = np.random.default_rng([seed, 1])
    state = plant_init(params)

    ref_rows = np.full((n_cycles, n_j), np.nan)
    q_rows = np.empty((n_cycles, n_j))
    u_rows = np.empty((n_cycles, 2 * n_j))
    stats = {name: np.zeros(n_cycles) for name in _STAT_COLS}
    stats["cost"][:n_warm] = np.nan
    stats["grad_inf"][:n_warm] = np.nan

    if n_warm:
        center = ctrl.model.scaler.unscale_u(np.full(2 * n_j, spec.u_mean))
        u_exc = _warmup_excitation(n_j, n_warm, rate, center, amplitude, seed)
        for k in range(n_warm):
            meas = plant_measure(state, params, rng)
            ctrl.observe(meas.q_meas, u_exc[k])
            q_rows[k] = meas.q_meas
            u_rows[k] = u_exc[k]
            state = plant_step(state, u_exc[k], period, params)

    T = spec.horizon
    for j in range(n_ref):
        k = n_warm + j
        meas = plant_measure(state, params, rng)
        idx = np.minimum(np.arange(j + 1, j + 1 + T), n_ref - 1)
        u_k = ctrl.step(meas.q_meas, reference[idx])
        tele = ctrl.telemetry[-1]
        ref_rows[k] = reference[j]
        q_rows[k] = meas.q_meas
        u_rows[k] = u_k
        for name in ("cost", "grad_inf"):
            stats[name][k] = tele[name]
        stats["iterations"][k] = tele["iterations"]
        stats["converged"][k] = float(tele["converged"])
        stats["fallback"][k] = float(tele["fallback"])
        state = plant_step(state, u_k, period, params)

    meta = {"controller": "nmpc", "seed": seed, "warmup": warmup,
            "control_rate": rate, "excitation_amplitude": amplitude,
            "plant": asdict(params), "ocp": asdict(spec)}
    if extra_meta:
        meta.update(extra_meta)
    return TrajectoryLog(t=np.arange(n_cycles) / rate, ref=ref_rows, q=q_rows,
                         u=u_rows, rate=rate, eval_start=n_warm, meta=meta,
                         **stats)


def _run_pi(params, ctrl, reference, warmup, seed, extra_meta):
    n_j = params.n_joints
    if ctrl.n_joints != n_j:
        raise DimensionMismatchError("controller joint count does not match the plant")
    rate = ctrl.rate
    period = 1.0 / rate
    n_warm = _whole_cycles(warmup, rate)
    ref_full = np.vstack([np.zeros((n_warm, n_j)), reference])
    n_cycles = ref_full.shape[0]
    rng = np.random.default_rng([seed, 1])
    state = plant_init(params)
    ctrl.reset()

    q_rows = np.empty((n_cycles, n_j))
    u_rows = np.empty((n_cycles, 2 * n_j))
    for k in range(n_cycles):
        meas = plant_measure(state, params, rng)
        u_k = ctrl.step(meas.q_meas, ref_full[k])
        q_rows[k] = meas.q_meas
        u_rows[k] = u_k
        state = plant_step(state, u_k, period, params)

    n = n_cycles
    meta = {"controller": "pi", "seed": seed, "warmup": warmup,
            "control_rate": rate, "plant": asdict(params),
            "pi": ctrl.to_meta()}
    if extra_meta:
        meta.update(extra_meta)
    return TrajectoryLog(t=np.arange(n) / rate, ref=ref_full, q=q_rows, u=u_rows,
                         cost=np.full(n, np.nan), iterations=np.zeros(n),
                         grad_inf=np.full(n, np.nan), converged=np.ones(n),
                         fallback=np.zeros(n), rate=rate, eval_start=n_warm,
                         meta=meta)


def reference_from_recipe(recipe: dict) -> np.ndarray:
    """Build a reference trajectory from a serializable recipe dict.

    ``kind: "ramp_hold"`` (the default) forwards the remaining keys to
    gen_reference; ``kind: "constant"`` holds ``value`` (scalar or per-joint)
    for ``n_cycles`` cycles over ``n_joints`` joints.
    """
    r = dict(recipe)
    kind = r.pop("kind", "ramp_hold")
    if kind == "ramp_hold":
        _, ref = gen_reference(**r)
        return ref
    if kind == "constant":
        try:
            value, n_cycles, n_joints = r.pop("value"), r.pop("n_cycles"), r.pop("n_joints")
        except KeyError as missing:
            raise ConfigError(f"constant reference recipe lacks {missing}") from None
        if r:
            raise ConfigError(f"unknown reference recipe keys {sorted(r)}")
        val = np.asarray(value, dtype=float).reshape(-1)
        if val.size == 1:
            val = np.full(n_joints, val[0])
        if val.shape != (n_joints,):
            raise DimensionMismatchError("constant reference value/joint mismatch")
        return np.tile(val, (int(n_cycles), 1))
    raise ConfigError(f"unknown reference kind {kind!r}")


def replay_run(meta: dict, model=None) -> TrajectoryLog:
    """Re-run a logged experiment from its recorded metadata.

    ``meta`` is the dict stored in a TrajectoryLog sidecar and must include a
    "reference" recipe (see reference_from_recipe). The receding-horizon
    controller additionally needs either a loaded model or a "checkpoint"
    directory path in the metadata. Returns a fresh log that matches the
    original digest when the metadata is complete.
    """
    if "reference" not in meta:
        raise ConfigError("metadata has no reference recipe to replay")
    plant_d = dict(meta["plant"])
    bw = BoucWenParams(**plant_d.pop("bouc_wen"))
    params = PlantParams(bouc_wen=bw, **plant_d)
    reference = reference_from_recipe(meta["reference"])
    kind = meta.get("controller")
    if kind == "nmpc":
        if model is None:
            if "checkpoint" not in meta:
                raise ConfigError("replay needs a model or a checkpoint path")
            model, _ = load_checkpoint(meta["checkpoint"])
        ctrl = NmpcController(model, OcpSpec(**meta["ocp"]))
    elif kind == "pi":
        ctrl = PiController(**meta["pi"])
    else:
        raise ConfigError(f"unknown controller kind {kind!r}")
    generated = {"controller", "seed", "warmup", "control_rate",
                 "excitation_amplitude", "plant", "ocp", "pi"}
    extra = {k: v for k, v in meta.items() if k not in generated}
    return run_closed_loop(params, ctrl, reference, warmup=meta["warmup"],
                           seed=meta["seed"],
                           excitation_amplitude=meta.get("excitation_amplitude", 0.08),
                           extra_meta=extra)


# ---------------------------------------------------------------------------
# evaluation protocols
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    """Per-channel error summary plus protocol details.

    Everything inside is JSON-serializable and deterministic (no wall-clock
    content), so a digest of the serialized report is reproducible.
    """

    rmse: list[float]
    mean_rmse: float
    channel_names: list[str]
    details: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.rmse = [float(v) for v in self.rmse]
        if any(v < 0.0 for v in self.rmse):
            raise ConfigError("rmse entries must be >= 0")
        if len(self.rmse) != len(self.channel_names):
            raise DimensionMismatchError("rmse and channel_names disagree")

    def to_dict(self) -> dict:
        return {"rmse": self.rmse, "mean_rmse": self.mean_rmse,
                "channel_names": self.channel_names, "details": self.details}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path: str) -> "EvalReport":
        with open(path) as f:
            return cls(**json.load(f))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def _check_model_log(model, log: SeriesLog) -> None:
    if model.scaler is None:
        raise ConfigError("model needs its scaler attached for evaluation")
    if model.scaler.x_names != log.x_names or model.scaler.u_names != log.u_names:
        raise DimensionMismatchError("log channels do not match the model scaler")


def eval_long_prediction(model, log: SeriesLog, warmup: float) -> EvalReport:
    """Warm the hidden state on measurements, then self-loop to the log's end.

    The first ``warmup`` seconds of the log feed measured (state, input)
    pairs; the remainder is predicted recursively from the model's own
    outputs given only the measured inputs. Reports per-channel RMSE in
    physical units over the predicted region, alongside that region's signal
    standard deviation for scale.
    """
    _check_model_log(model, log)
    n_w = int(round(warmup * log.rate))
    if n_w < 1 or abs(n_w - warmup * log.rate) > 1e-9:
        raise ConfigError("warmup must be a positive whole number of samples")
    n_s = len(log)
    if n_s < n_w + 2:
        raise InsufficientDataError("log shorter than warm-up plus one prediction")
    scaler = model.scaler
    xs = scaler.scale_x(log.x)
    us = scaler.scale_u(log.u)
    n_p = n_s - n_w - 1
    preds = rollout(model, xs, us, n_w=n_w, n_p=n_p, hidden_mode="propagate")
    err = scaler.unscale_x(preds) - log.x[n_w + 1:]
    rmse = np.sqrt(np.mean(err * err, axis=0))
    std = log.x[n_w + 1:].std(axis=0)
    rel = np.where(std > 0.0, rmse / np.where(std > 0.0, std, 1.0), np.inf)
    details = {"protocol": "long_prediction", "warmup_s": warmup,
               "n_warm": n_w, "n_pred": n_p,
               "signal_std": std.tolist(), "rel_rmse": rel.tolist()}
    return EvalReport(rmse=rmse.tolist(), mean_rmse=float(rmse.mean()),
                      channel_names=list(log.x_names), details=details)


def _probe_roll(model, mode: str, hidden: Hidden, xs, us, k: int,
                horizon: int) -> np.ndarray:
    """Scaled per-step absolute horizon errors from one probe point."""
    if mode == "zero":
        h = Hidden.zeros(model.arch, 1)
    else:
        h = hidden.copy()
    frozen = h.copy() if mode == "freeze" else None
    x_in = xs[k]
    errs = np.zeros((horizon, xs.shape[1]))
    for j in range(horizon):
        inp = np.concatenate([x_in, us[k + j]])[None, :]
        if mode == "freeze":
            top, _, _ = step_stack(model, inp, frozen)
        else:
            top, h, _ = step_stack(model, inp, h)
        pred = head_forward(model, top)[0]
        errs[j] = np.abs(pred - xs[k + 1 + j])
        x_in = pred
    return errs


def eval_horizon_ablation(variants: dict, log: SeriesLog, horizon: int,
                          n_probes: int = 20, warmup: float = 50.0) -> dict:
    """Short-horizon accuracy probes that mimic receding-horizon use.

    ``variants`` maps a name to (model, mode). Each network runs over the log
    once: hidden state warmed on the first ``warmup`` seconds of
    measurements, then self-loop (its own outputs fed back, measured inputs
    given). At each of ``n_probes`` evenly spaced probe cycles the measured
    state is injected and a ``horizon``-step prediction is rolled with the
    variant's hidden-state mode: "propagate" keeps updating it, "freeze"
    holds the snapshot taken at the probe, "zero" restarts from zeros.
    Returns, per variant, per-step absolute errors averaged over probes (and
    over channels for "per_step"), in physical units.
    """
    if horizon < 1:
        raise ConfigError("horizon must be >= 1")
    if n_probes < 1:
        raise ConfigError("n_probes must be >= 1")
    results = {}
    for name, (model, mode) in variants.items():
        if mode not in ("propagate", "freeze", "zero"):
            raise ConfigError(f"unknown hidden-state mode {mode!r}")
        _check_model_log(model, log)
        n_w = int(round(warmup * log.rate))
        if n_w < 1 or abs(n_w - warmup * log.rate) > 1e-9:
            raise ConfigError("warmup must be a positive whole number of samples")
        n_s = len(log)
        last = n_s - horizon - 1
        if last < n_w:
            raise InsufficientDataError("log shorter than warm-up plus one horizon")
        probes = np.unique(np.round(np.linspace(n_w, last, n_probes)).astype(int))
        if probes.size < n_probes:
            raise InsufficientDataError("log too short for the requested probe count")
        scaler = model.scaler
        xs = scaler.scale_x(log.x)
        us = scaler.scale_u(log.u)
        half_span = 0.5 * (scaler.x_hi - scaler.x_lo)
        h = Hidden.zeros(model.arch, 1)
        errs = np.zeros((probes.size, horizon, xs.shape[1]))
        x_hat = None
        pi = 0
        for k in range(n_s - 1):
            if pi < probes.size and k == probes[pi]:
                errs[pi] = _probe_roll(model, mode, h, xs, us, k, horizon) * half_span
                pi += 1
                if pi == probes.size:
                    break
            x_k = xs[k] if k <= n_w else x_hat
            top, h, _ = step_stack(model, np.concatenate([x_k, us[k]])[None, :], h)
            x_hat = head_forward(model, top)[0]
        per_step_channel = errs.mean(axis=0)
        per_step = per_step_channel.mean(axis=1)
        results[name] = {"per_step": per_step,
                         "per_step_channel": per_step_channel,
                         "mean": float(per_step.mean()),
                         "first": float(per_step[0]),
                         "probe_indices": probes}
    return results
