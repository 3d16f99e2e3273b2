"""Simulated antagonistic pneumatic soft-robot plant.

Each joint is driven by a pair of bellows. The model combines
    * a first-order pressure lag per bellows,
    * second-order joint dynamics with linear stiffness and damping,
    * smoothed Coulomb friction,
    * a Bouc-Wen hysteresis state per joint feeding back as torque,
    * weak linear coupling between neighbouring joints,
    * a stiff soft-stop spring outside the mechanical joint range.

Integration is fixed-step RK4 at ``params.sim_dt`` with the commanded
pressures held constant over a step, so trajectories are bit-reproducible.
Units: rad, rad/s, bar, N*m, s. Measurements are reported in degrees.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionMismatchError, NonFiniteStateError

RAD_TO_DEG = 180.0 / np.pi


@dataclass(frozen=True)
class BoucWenParams:
    """Hysteresis evolution dh/dt = a*qd - beta*|qd|*h - gamma*qd*|h| with torque -alpha*h."""

    a: float = 1.0
    beta: float = 10.0
    gamma: float = 5.0
    alpha: float = 0.5

    def __post_init__(self) -> None:
        if self.beta + self.gamma <= 0.0:
            raise ConfigError("bouc-wen requires beta + gamma > 0 for bounded h")
        if self.a < 0.0 or self.alpha < 0.0:
            raise ConfigError("bouc-wen a and alpha must be >= 0")

    def saturation(self) -> float:
        """Stationary |h| bound a / (beta + gamma) for monotone motion."""
        return self.a / (self.beta + self.gamma)


@dataclass(frozen=True)
class PlantParams:
    n_joints: int = 5
    pressure_tau: float = 0.040          # bellows lag time constant [s]
    torque_gain: float = 0.55            # N*m per bar of differential pressure
    joint_stiffness: float = 1.0         # N*m/rad
    joint_damping: float = 0.15          # N*m*s/rad
    inertia: float = 0.01                # kg*m^2
    coulomb: float = 0.01                # N*m, smoothed via tanh(qd/coulomb_eps)
    coulomb_eps: float = 0.01            # rad/s
    bouc_wen: BoucWenParams = field(default_factory=BoucWenParams)
    coupling_gain: float = 0.05          # N*m/rad toward chain neighbours
    gravity_torque: float = 0.0          # N*m, -gravity_torque*sin(q); off by default
    angle_limit: float = 20.0 / RAD_TO_DEG   # rad, nominal joint range
    softstop_stiffness: float = 50.0     # N*m/rad beyond the limit
    pressure_range: float = 0.7          # bar, commands clipped to [0, range]
    encoder_quantum: float = 0.1         # deg
    noise_std: float = 0.0               # deg, gaussian noise before quantization
    sim_dt: float = 1e-3                 # s, internal RK4 step

    def __post_init__(self) -> None:
        if self.n_joints < 1:
            raise ConfigError("n_joints must be >= 1")
        if not (0.010 <= self.pressure_tau <= 0.080):
            raise ConfigError("pressure_tau must lie in [0.010, 0.080] s")
        if self.inertia <= 0.0:
            raise ConfigError("inertia must be > 0")
        if self.sim_dt <= 0.0 or self.sim_dt > 1e-3 + 1e-12:
            raise ConfigError("sim_dt must be positive and at most 1 ms")
        if self.pressure_range <= 0.0:
            raise ConfigError("pressure_range must be > 0")
        if self.angle_limit <= 0.0:
            raise ConfigError("angle_limit must be > 0")
        if self.encoder_quantum <= 0.0:
            raise ConfigError("encoder_quantum must be > 0")
        if self.coulomb_eps <= 0.0:
            raise ConfigError("coulomb_eps must be > 0")
        for name in ("torque_gain", "joint_stiffness", "joint_damping", "coulomb",
                     "coupling_gain", "softstop_stiffness", "noise_std", "gravity_torque"):
            if getattr(self, name) < 0.0:
                raise ConfigError(f"{name} must be >= 0")


@dataclass
class PlantState:
    """Full simulation state; all arrays are float64 copies owned by the state."""

    q: np.ndarray        # (n,) joint angles [rad]
    qd: np.ndarray       # (n,) joint velocities [rad/s]
    p: np.ndarray        # (2n,) bellows pressures [bar], pair-major (j1a, j1b, j2a, ...)
    h: np.ndarray        # (n,) Bouc-Wen hysteresis states
    t: float = 0.0

    def copy(self) -> "PlantState":
        return PlantState(self.q.copy(), self.qd.copy(), self.p.copy(), self.h.copy(), self.t)


@dataclass(frozen=True)
class Measurement:
    q_meas: np.ndarray   # (n,) quantized joint angles [deg]
    p_meas: np.ndarray   # (2n,) bellows pressures [bar]
    t: float


def plant_init(params: PlantParams, q0: np.ndarray | None = None) -> PlantState:
    """Return a rest state: zero velocity and hysteresis, pressures at zero.

    ``q0`` is in rad and must lie inside the nominal joint range.
    """
    n = params.n_joints
    q = np.zeros(n) if q0 is None else np.asarray(q0, dtype=float).copy()
    if q.shape != (n,):
        raise DimensionMismatchError(f"q0 must have shape ({n},), got {q.shape}")
    if np.any(np.abs(q) > params.angle_limit):
        raise ConfigError("q0 outside the joint range")
    return PlantState(q=q, qd=np.zeros(n), p=np.zeros(2 * n), h=np.zeros(n), t=0.0)


def _derivatives(q, qd, p, h, u_des, params: PlantParams):
    """Time derivatives of (q, qd, p, h) for held desired pressures."""
    bw = params.bouc_wen
    dp = (u_des - p) / params.pressure_tau
    diff = p[0::2] - p[1::2]
    torque = params.torque_gain * diff
    torque -= params.joint_stiffness * q
    torque -= params.joint_damping * qd
    torque -= params.coulomb * np.tanh(qd / params.coulomb_eps)
    torque -= bw.alpha * h
    if params.gravity_torque != 0.0:
        torque -= params.gravity_torque * np.sin(q)
    if params.coupling_gain != 0.0 and params.n_joints > 1:
        neighbour = np.zeros_like(q)
        neighbour[:-1] += q[1:] - q[:-1]
        neighbour[1:] += q[:-1] - q[1:]
        torque += params.coupling_gain * neighbour
    over = np.abs(q) - params.angle_limit
    mask = over > 0.0
    if np.any(mask):
        torque = torque - np.where(mask, params.softstop_stiffness * np.sign(q) * over, 0.0)
    qdd = torque / params.inertia
    dh = bw.a * qd - bw.beta * np.abs(qd) * h - bw.gamma * qd * np.abs(h)
    return qd, qdd, dp, dh


def plant_step(state: PlantState, u_des: np.ndarray, dt: float, params: PlantParams) -> PlantState:
    """Advance the plant by ``dt`` (an integer multiple of ``sim_dt``) under held commands.

    The desired pressures are clipped to [0, pressure_range] and kept constant
    for the whole interval (zero-order hold). Raises NonFiniteStateError if the
    integration blows up.
    """
    u = np.asarray(u_des, dtype=float)
    if u.shape != (2 * params.n_joints,):
        raise DimensionMismatchError(
            f"u_des must have shape ({2 * params.n_joints},), got {u.shape}")
    n_sub = int(round(dt / params.sim_dt))
    if n_sub < 1 or abs(n_sub * params.sim_dt - dt) > 1e-9:
        raise ConfigError(f"dt={dt} is not a positive integer multiple of sim_dt={params.sim_dt}")
    u = np.clip(u, 0.0, params.pressure_range)

    q, qd, p, h = state.q.copy(), state.qd.copy(), state.p.copy(), state.h.copy()
    dt_s = params.sim_dt
    for _ in range(n_sub):
        k1 = _derivatives(q, qd, p, h, u, params)
        k2 = _derivatives(q + 0.5 * dt_s * k1[0], qd + 0.5 * dt_s * k1[1],
                          p + 0.5 * dt_s * k1[2], h + 0.5 * dt_s * k1[3], u, params)
        k3 = _derivatives(q + 0.5 * dt_s * k2[0], qd + 0.5 * dt_s * k2[1],
                          p + 0.5 * dt_s * k2[2], h + 0.5 * dt_s * k2[3], u, params)
        k4 = _derivatives(q + dt_s * k3[0], qd + dt_s * k3[1],
                          p + dt_s * k3[2], h + dt_s * k3[3], u, params)
        q = q + (dt_s / 6.0) * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
        qd = qd + (dt_s / 6.0) * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])
        p = p + (dt_s / 6.0) * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2])
        h = h + (dt_s / 6.0) * (k1[3] + 2.0 * k2[3] + 2.0 * k3[3] + k4[3])

    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(qd))
            and np.all(np.isfinite(p)) and np.all(np.isfinite(h))):
        raise NonFiniteStateError("plant state became non-finite during integration")
    return PlantState(q=q, qd=qd, p=p, h=h, t=state.t + n_sub * params.sim_dt)


def plant_measure(state: PlantState, params: PlantParams,
                  rng: np.random.Generator | int | None = None) -> Measurement:
    """Encoder + pressure readout.

    Joint angles are converted to degrees, optionally disturbed with gaussian
    noise of ``noise_std`` deg, then quantized to ``encoder_quantum``. The same
    seed always produces the same measurement. Pressures are returned exactly.
    """
    q_deg = state.q * RAD_TO_DEG
    if params.noise_std > 0.0:
        if rng is None:
            raise ConfigError("noise_std > 0 requires an rng or seed")
        gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        q_deg = q_deg + gen.normal(0.0, params.noise_std, size=q_deg.shape)
    quantum = params.encoder_quantum
    q_meas = np.round(q_deg / quantum) * quantum
    return Measurement(q_meas=q_meas, p_meas=state.p.copy(), t=state.t)


@dataclass(frozen=True)
class SweepSpec:
    """Stepped quasi-static differential-pressure sweep for loop-area probing.

    The differential command walks 0 -> +amplitude -> -amplitude -> +amplitude
    in ``n_levels`` evenly spaced levels per branch, holding each level for
    ``settle_time`` so the joint reaches equilibrium. The first half cycle is a
    lead-in; the area is computed over the final closed cycle.
    """

    amplitude: float = 0.7       # bar, peak differential pressure
    n_levels: int = 24           # levels per quarter-to-quarter branch
    settle_time: float = 4.0     # s per level
    reverse: bool = False        # start downward instead of upward

    def __post_init__(self) -> None:
        if self.amplitude <= 0.0 or self.n_levels < 4 or self.settle_time <= 0.0:
            raise ConfigError("sweep requires amplitude > 0, n_levels >= 4, settle_time > 0")


def _sweep_levels(spec: SweepSpec) -> np.ndarray:
    up = np.linspace(0.0, spec.amplitude, spec.n_levels)
    down = np.linspace(spec.amplitude, -spec.amplitude, 2 * spec.n_levels)
    back = np.linspace(-spec.amplitude, spec.amplitude, 2 * spec.n_levels)
    levels = np.concatenate([up, down[1:], back[1:], down[1:], back[1:]])
    if spec.reverse:
        levels = -levels
    return levels


def hysteresis_loop_area(params: PlantParams, joint: int = 0,
                         sweep: SweepSpec | None = None) -> float:
    """Signed area [deg*bar] of the quasi-static angle/differential-pressure loop.

    Each sweep level is held until the joint settles, so viscous damping does
    not contribute; any remaining area comes from genuinely path-dependent
    torque terms (Bouc-Wen state and Coulomb friction). A dissipative loop is
    always traversed counterclockwise in the (differential pressure, angle)
    plane, so the sign is reported relative to the sweep direction: upward-first
    sweeps report the loop area as positive, reversed sweeps as negative.
    """
    if not 0 <= joint < params.n_joints:
        raise ConfigError(f"joint index {joint} out of range")
    sweep = sweep or SweepSpec()
    mean = 0.5 * params.pressure_range
    if sweep.amplitude > params.pressure_range:
        raise ConfigError("sweep amplitude exceeds the achievable differential pressure")
    levels = _sweep_levels(sweep)
    # commands: differential d around the mean working pressure, clipped pairs
    state = plant_init(params)
    u = np.zeros(2 * params.n_joints)
    n_keep = 2 * (2 * sweep.n_levels - 1)      # final closed cycle: +A -> -A -> +A
    qs: list[float] = []
    ds: list[float] = []
    for i, d in enumerate(levels):
        u[2 * joint] = mean + 0.5 * d
        u[2 * joint + 1] = mean - 0.5 * d
        state = plant_step(state, u, sweep.settle_time, params)
        if i >= len(levels) - n_keep:
            qs.append(state.q[joint] * RAD_TO_DEG)
            ds.append(d)
    x = np.asarray(ds)
    y = np.asarray(qs)
    # shoelace area of the closed (diff pressure, angle) polygon; counterclockwise
    # traversal (angle lagging on the way up) gives a positive value
    area = 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))
    return -area if sweep.reverse else area
