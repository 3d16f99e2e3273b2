"""Receding-horizon optimal control with a recurrent dynamics constraint.

Each control cycle solves a T-step optimal control problem in which the
trained network predicts the state trajectory while its hidden state is held
constant at the value accumulated from measurements (one network step per
cycle, applied with a unit delay). Decision variables are the T-1 inputs
u_1..u_{T-1}; the terminal state reuses the last input (zero-order hold).

The cost is

    sum_{k=1}^{T-1} [ Q_s ||x_des,k - x_k||^2 + Q_d ||x_k - x_{k-1}||^2
                      + R_d ||u_k - u_{k-1}||^2 + R_m ||stiff(u_k)||^2 ]
    + Q_t ||x_des,T - x_T||^2

with x_0 the measured state, u_0 the previously applied input, and stiff(u)
the per-joint deviation of the two bellows pressures from twice the
mean-pressure target. State bounds |x| <= x_max enter as a smooth quadratic
hinge penalty; input bounds are enforced exactly by box projection inside a
projected-gradient solver with Barzilai-Borwein steps and an Armijo line
search. All quantities are in scaled units unless stated otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionMismatchError, NonFiniteStateError
from .rnn.model import (
    Hidden,
    RnnModel,
    gru_backward,
    gru_forward,
    head_forward,
    lstm_backward,
    lstm_forward,
)

# ---------------------------------------------------------------------------
# problem specification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OcpSpec:
    """Weights, limits and solver budget; all bounds in scaled units."""

    horizon: int = 4                 # T: predicted steps per cycle
    q_s: float = 5.0                 # stage state tracking
    q_d: float = 0.0                 # state increment damping
    q_t: float = 10.0                # terminal state tracking
    r_d: float = 4.0                 # input increment damping
    r_m: float = 5.0                 # mean-pressure (stiffness) regularizer
    u_mean: float = 0.0              # scaled mean-pressure target per channel
    u_min: float = -1.0
    u_max: float = 1.0
    x_max: float = 1.0
    control_rate: float = 5.0        # Hz
    max_iters: int = 50
    tol: float = 1e-6
    state_penalty: float | None = None     # default 1e3 * q_s

    def __post_init__(self):
        if self.horizon < 2:
            raise ConfigError("horizon must be >= 2")
        if min(self.q_s, self.q_d, self.q_t, self.r_d, self.r_m) < 0:
            raise ConfigError("weights must be nonnegative")
        if not self.u_min < self.u_max:
            raise ConfigError("need u_min < u_max")
        if self.x_max <= 0:
            raise ConfigError("x_max must be positive")
        if self.control_rate <= 0 or self.max_iters < 1 or self.tol <= 0:
            raise ConfigError("control_rate, max_iters and tol must be positive")

    @property
    def penalty_weight(self) -> float:
        return 1e3 * self.q_s if self.state_penalty is None else self.state_penalty


def stiffness_residual(u_k: np.ndarray, u_mean: float) -> np.ndarray:
    """Per-joint sum of the two antagonistic channels minus 2 * u_mean.

    Channels are interleaved pairs [j0_a, j0_b, j1_a, j1_b, ...].
    """
    u_k = np.asarray(u_k, dtype=float)
    if u_k.shape[-1] % 2 != 0:
        raise DimensionMismatchError("inputs must pair two channels per joint")
    return u_k[..., 0::2] + u_k[..., 1::2] - 2.0 * u_mean


def spec_from_physical(scaler, u_min_bar: float, u_max_bar: float,
                       u_mean_bar: float, **kwargs) -> OcpSpec:
    """Build an OcpSpec from physical-unit pressure entries.

    Converts the pressure bounds and the mean-pressure target through the
    model's scaler (channel-wise, then tightened to a single scalar bound and
    intersected with the data range [-1, 1]). State bounds are native to the
    scaled space and pass through ``kwargs`` unchanged.
    """
    du = scaler.u_lo.shape[0]
    lo = scaler.scale_u(np.full(du, u_min_bar))
    hi = scaler.scale_u(np.full(du, u_max_bar))
    mean = scaler.scale_u(np.full(du, u_mean_bar))
    if not np.allclose(mean, mean[0], atol=1e-12):
        raise ConfigError("mean pressure maps to different scaled values "
                          "per channel; channels need matching ranges")
    return OcpSpec(u_min=max(-1.0, float(lo.max())),
                   u_max=min(1.0, float(hi.min())),
                   u_mean=float(mean[0]), **kwargs)


# ---------------------------------------------------------------------------
# dynamics adapters: one frozen-hidden network step with an exact VJP
# ---------------------------------------------------------------------------

class FrozenRnnDynamics:
    """The trained network as a memoryless map f(x, u) at a fixed hidden state."""

    def __init__(self, model: RnnModel, hidden: Hidden):
        if hidden.batch != 1:
            raise DimensionMismatchError("controller hidden state must have batch 1")
        self.model = model
        self.hidden = hidden
        self.state_dim = model.arch.state_dim
        self.input_dim = model.arch.input_dim

    def step(self, x: np.ndarray, u: np.ndarray):
        model = self.model
        lstm = model.arch.cell == "lstm"
        cur = np.concatenate([x, u])[None, :]
        caches = []
        for l, lp in enumerate(model.layers):
            if lstm:
                hnew, _, cache = lstm_forward(lp, cur, self.hidden.h[l],
                                              self.hidden.c[l])
            else:
                hnew, cache = gru_forward(lp, cur, self.hidden.h[l])
            caches.append(cache)
            cur = hnew
        return head_forward(model, cur)[0], caches

    def vjp(self, caches, dpred: np.ndarray):
        """Backpropagate dpred through one frozen step; returns (dx, du).

        The hidden state is an exogenous constant here, so its gradient is
        discarded; only the input path carries derivatives.
        """
        model = self.model
        lstm = model.arch.cell == "lstm"
        d_above = dpred[None, :] @ model.w_out
        for l in range(len(model.layers) - 1, -1, -1):
            if lstm:
                dc = np.zeros_like(d_above)
                d_input, _, _ = lstm_backward(model.layers[l], caches[l],
                                              d_above, dc, None)
            else:
                d_input, _ = gru_backward(model.layers[l], caches[l],
                                          d_above, None)
            d_above = d_input
        return d_above[0, :self.state_dim], d_above[0, self.state_dim:]


def _dynamics(model, hidden):
    if isinstance(model, RnnModel):
        return FrozenRnnDynamics(model, hidden)
    if hasattr(model, "step") and hasattr(model, "vjp"):
        return model
    raise ConfigError("model must be an RnnModel or expose step()/vjp()")


# ---------------------------------------------------------------------------
# cost and gradient
# ---------------------------------------------------------------------------

def _check_problem(u_seq, x0, u_prev, ref, spec, dyn):
    u_seq = np.asarray(u_seq, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    u_prev = np.asarray(u_prev, dtype=float)
    ref = np.asarray(ref, dtype=float)
    T = spec.horizon
    if u_seq.shape != (T - 1, dyn.input_dim):
        raise DimensionMismatchError(
            f"u_seq must be ({T - 1}, {dyn.input_dim}), got {u_seq.shape}")
    if x0.shape != (dyn.state_dim,):
        raise DimensionMismatchError(f"x0 must be ({dyn.state_dim},)")
    if u_prev.shape != (dyn.input_dim,):
        raise DimensionMismatchError(f"u_prev must be ({dyn.input_dim},)")
    if ref.shape != (T, dyn.state_dim):
        raise DimensionMismatchError(
            f"reference must cover steps 1..{T}: ({T}, {dyn.state_dim})")
    return u_seq, x0, u_prev, ref


def _predict(dyn, x0, u_seq, T):
    """States x_1..x_T under u_1..u_{T-1}; the terminal step reuses u_{T-1}."""
    states = np.zeros((T, x0.shape[0]))
    caches = []
    x = x0
    for k in range(T):
        x, cache = dyn.step(x, u_seq[min(k, T - 2)])
        states[k] = x
        caches.append(cache)
    return states, caches


def _hinge(x, x_max):
    return np.maximum(0.0, np.abs(x) - x_max)


def _cost_from_states(states, u_seq, x0, u_prev, ref, spec):
    T = spec.horizon
    cost = 0.0
    for k in range(T - 1):
        e = ref[k] - states[k]
        cost += spec.q_s * (e @ e)
        dx = states[k] - (states[k - 1] if k > 0 else x0)
        cost += spec.q_d * (dx @ dx)
        du = u_seq[k] - (u_seq[k - 1] if k > 0 else u_prev)
        cost += spec.r_d * (du @ du)
        r = stiffness_residual(u_seq[k], spec.u_mean)
        cost += spec.r_m * (r @ r)
    e_t = ref[T - 1] - states[T - 1]
    cost += spec.q_t * (e_t @ e_t)
    pen = _hinge(states, spec.x_max)
    cost += spec.penalty_weight * float(np.sum(pen * pen))
    return float(cost)


def ocp_cost(u_seq, x0, hidden, ref, spec: OcpSpec, model, u_prev=None):
    """Cost and predicted states for one input trajectory (frozen hidden state).

    ``u_prev`` anchors the first input increment and defaults to zeros (the
    scaled mean-pressure point).
    """
    dyn = _dynamics(model, hidden)
    if u_prev is None:
        u_prev = np.zeros(dyn.input_dim)
    u_seq, x0, u_prev, ref = _check_problem(u_seq, x0, u_prev, ref, spec, dyn)
    states, _ = _predict(dyn, x0, u_seq, spec.horizon)
    return _cost_from_states(states, u_seq, x0, u_prev, ref, spec), states


def ocp_gradient(u_seq, x0, hidden, ref, spec: OcpSpec, model, u_prev=None):
    """Exact cost gradient with respect to ``u_seq``; returns (grad, cost, states).

    An adjoint sweep walks the horizon backwards: the state-cost derivatives
    feed vector-Jacobian products of the frozen network step, which route
    gradients both to each step's input and to the previous state (the
    fed-back prediction). The hidden state is constant and contributes
    nothing.
    """
    dyn = _dynamics(model, hidden)
    if u_prev is None:
        u_prev = np.zeros(dyn.input_dim)
    u_seq, x0, u_prev, ref = _check_problem(u_seq, x0, u_prev, ref, spec, dyn)
    T = spec.horizon
    states, caches = _predict(dyn, x0, u_seq, T)
    cost = _cost_from_states(states, u_seq, x0, u_prev, ref, spec)

    # direct (non-dynamics) derivatives of the cost wrt each predicted state
    s = np.zeros_like(states)
    for k in range(T - 1):
        s[k] += 2.0 * spec.q_s * (states[k] - ref[k])
        dx = states[k] - (states[k - 1] if k > 0 else x0)
        s[k] += 2.0 * spec.q_d * dx
        if k > 0:
            s[k - 1] -= 2.0 * spec.q_d * dx
    s[T - 1] += 2.0 * spec.q_t * (states[T - 1] - ref[T - 1])
    pen = _hinge(states, spec.x_max)
    s += 2.0 * spec.penalty_weight * pen * np.sign(states)

    grad = np.zeros_like(u_seq)
    # input-only terms
    for k in range(T - 1):
        du = u_seq[k] - (u_seq[k - 1] if k > 0 else u_prev)
        grad[k] += 2.0 * spec.r_d * du
        if k > 0:
            grad[k - 1] -= 2.0 * spec.r_d * du
        r = stiffness_residual(u_seq[k], spec.u_mean)
        grad[k, 0::2] += 2.0 * spec.r_m * r
        grad[k, 1::2] += 2.0 * spec.r_m * r
    # adjoint sweep through the dynamics
    carry = np.zeros(dyn.state_dim)
    for k in range(T - 1, -1, -1):
        upstream = s[k] + carry
        d_x, d_u = dyn.vjp(caches[k], upstream)
        grad[min(k, T - 2)] += d_u
        carry = d_x
    return grad, cost, states


# ---------------------------------------------------------------------------
# projected-gradient solver
# ---------------------------------------------------------------------------

@dataclass
class OcpSolution:
    u_seq: np.ndarray
    states: np.ndarray
    cost: float
    iterations: int
    grad_inf: float
    converged: bool


def ocp_solve(x0, hidden, ref, spec: OcpSpec, model, warm_start,
              u_prev=None) -> OcpSolution:
    """Minimize the horizon cost over box-constrained inputs.

    Spectral projected gradient descent: Barzilai-Borwein step lengths with a
    nonmonotone (10-step window) Armijo line search along the projection arc,
    terminating on the stationarity measure ||P(u - g) - u||_inf <= tol or on
    the iteration budget. The window reference never exceeds the warm start's
    cost, so the returned cost cannot either; every iterate satisfies the
    input bounds exactly by construction, and the best iterate seen is the
    one returned.

    Raises NonFiniteStateError if the model produces a nonfinite cost at the
    warm start (callers fall back to holding the previous input).
    """
    dyn = _dynamics(model, hidden)
    if u_prev is None:
        u_prev = np.zeros(dyn.input_dim)

    def project(u):
        return np.clip(u, spec.u_min, spec.u_max)

    def f(u):
        states, _ = _predict(dyn, x0, u, spec.horizon)
        return _cost_from_states(states, u, x0, u_prev, ref, spec), states

    def fg(u):
        return ocp_gradient(u, x0, hidden, ref, spec, model, u_prev)

    u = project(np.asarray(warm_start, dtype=float).copy())
    grad, cost, states = fg(u)
    if not np.isfinite(cost):
        raise NonFiniteStateError("nonfinite cost at warm start")
    stat = float(np.abs(project(u - grad) - u).max())
    if stat <= spec.tol:
        return OcpSolution(u, states, cost, 0, stat, True)

    best_u, best_cost, best_states, best_stat = u, cost, states, stat
    window = [cost]
    alpha = 1.0 / max(1e-8, float(np.abs(grad).max()))
    converged = False
    it = 0
    for it in range(1, spec.max_iters + 1):
        ref_cost = max(window)
        step = alpha
        accepted = False
        for _ in range(30):
            cand = project(u - step * grad)
            d = cand - u
            gd = float(np.sum(grad * d))
            if gd >= 0.0:
                break                      # numerically stationary
            c_cost, _ = f(cand)
            if np.isfinite(c_cost) and c_cost <= ref_cost + 1e-4 * gd:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        new_grad, new_cost, new_states = fg(cand)
        s_vec = (cand - u).ravel()
        y_vec = (new_grad - grad).ravel()
        sy = float(s_vec @ y_vec)
        if sy > 1e-16:
            alpha = min(max(float(s_vec @ s_vec) / sy, 1e-8), 1e8)
        else:
            alpha = min(alpha * 2.0, 1e8)
        u, grad, cost, states = cand, new_grad, new_cost, new_states
        window.append(cost)
        if len(window) > 10:
            window.pop(0)
        stat = float(np.abs(project(u - grad) - u).max())
        if stat <= spec.tol:
            return OcpSolution(u, states, cost, it, stat, True)
        if cost < best_cost:
            best_u, best_cost, best_states, best_stat = u, cost, states, stat
    return OcpSolution(best_u, best_states, best_cost, it, best_stat, converged)


# ---------------------------------------------------------------------------
# the cycling controller
# ---------------------------------------------------------------------------

@dataclass
class MpcState:
    """Persistent controller memory across cycles."""

    hidden: Hidden
    u_prev: np.ndarray               # last applied input, scaled
    warm: np.ndarray                 # warm-start sequence, (T-1, du), scaled
    pending: tuple | None = None     # (x, u) pair awaiting the hidden update
    cycle: int = 0


class NmpcController:
    """Receding-horizon controller around a trained scaled-units model.

    The cycle protocol is: feed the previous cycle's (measurement, applied
    input) pair through the network once (unit-delay hidden update, the same
    pairing the model saw in training), solve the horizon problem from the
    current measurement with the hidden state frozen, apply the first input,
    and shift the solution one step as the next warm start. If the solver
    reports a nonfinite cost the controller holds the previous input for one
    cycle and resets the warm start.
    """

    def __init__(self, model: RnnModel, spec: OcpSpec):
        if model.scaler is None:
            raise ConfigError("controller model needs its scaler attached")
        self.model = model
        self.spec = spec
        du = model.arch.input_dim
        u0 = np.full(du, spec.u_mean, dtype=float)
        self.state = MpcState(hidden=Hidden.zeros(model.arch, 1),
                              u_prev=u0.copy(),
                              warm=np.tile(u0, (spec.horizon - 1, 1)))
        self.telemetry: list[dict] = []

    # -- measurement plumbing --------------------------------------------------

    def _scale_measurement(self, x_phys: np.ndarray) -> np.ndarray:
        x = self.model.scaler.scale_x(np.asarray(x_phys, dtype=float))
        return np.clip(x, -1.0, 1.0)

    def _advance_hidden(self) -> None:
        if self.state.pending is None:
            return
        x, u = self.state.pending
        from .rnn.model import step_stack
        inp = np.concatenate([x, u])[None, :]
        _, self.state.hidden, _ = step_stack(self.model, inp, self.state.hidden)
        self.state.pending = None

    def observe(self, x_phys: np.ndarray, u_bar: np.ndarray) -> None:
        """Record an externally applied (measurement, input) pair.

        Used while another controller (or an excitation sequence) is driving
        the plant, so the hidden state is warmed up before the first cycle.
        """
        x = self._scale_measurement(x_phys)
        u = np.clip(self.model.scaler.scale_u(np.asarray(u_bar, dtype=float)),
                    self.spec.u_min, self.spec.u_max)
        self._advance_hidden()
        self.state.pending = (x, u)
        self.state.u_prev = u.copy()
        self.state.warm = np.tile(u, (self.spec.horizon - 1, 1))

    # -- one control cycle -----------------------------------------------------

    def step(self, x_phys: np.ndarray, ref_phys: np.ndarray) -> np.ndarray:
        """One cycle: measurement and T-step reference in, pressures (bar) out."""
        spec = self.spec
        x = self._scale_measurement(x_phys)
        ref = self.model.scaler.scale_x(np.asarray(ref_phys, dtype=float))
        ref = np.clip(ref, -spec.x_max, spec.x_max)
        if ref.shape != (spec.horizon, self.model.arch.state_dim):
            raise DimensionMismatchError(
                f"reference window must be ({spec.horizon}, "
                f"{self.model.arch.state_dim})")
        self._advance_hidden()
        fallback = False
        try:
            sol = ocp_solve(x, self.state.hidden, ref, spec, self.model,
                            self.state.warm, u_prev=self.state.u_prev)
            u_apply = sol.u_seq[0]
            self.state.warm = np.vstack([sol.u_seq[1:], sol.u_seq[-1:]])
            stats = {"cost": sol.cost, "iterations": sol.iterations,
                     "grad_inf": sol.grad_inf, "converged": sol.converged}
        except NonFiniteStateError:
            fallback = True
            u_apply = self.state.u_prev.copy()
            self.state.warm = np.tile(u_apply, (spec.horizon - 1, 1))
            stats = {"cost": float("nan"), "iterations": 0,
                     "grad_inf": float("nan"), "converged": False}
        self.telemetry.append({"cycle": self.state.cycle,
                               "fallback": fallback, **stats})
        self.state.pending = (x, u_apply.copy())
        self.state.u_prev = u_apply.copy()
        self.state.cycle += 1
        return self.model.scaler.unscale_u(u_apply)
