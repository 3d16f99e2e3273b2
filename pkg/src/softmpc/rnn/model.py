"""Recurrent network built on numpy: stacked GRU/LSTM layers plus a linear head.

Conventions (fixed so checkpoints are unambiguous):
    * double biases: every gate has an input-side and a recurrent-side bias;
    * GRU gate order update/reset/candidate with
          z = sig(Wz in + bz + Uz h' + cz)
          r = sig(Wr in + br + Ur h' + cr)
          g = tanh(Wg in + bg + r * (Ug h' + cg))
          h = (1 - z) * h' + z * g
      (the reset gate scales the recurrent contribution including its bias);
    * LSTM gate order input/forget/output/candidate with the usual equations
      and tanh cell nonlinearity;
    * layer 0 consumes [state, actuation] concatenated, deeper layers consume
      the hidden vector below; the head maps the top hidden vector to the
      next-state prediction.

Initialization: orthogonal recurrent blocks (one per gate), uniform fan-in
input weights, zero biases except the LSTM forget-gate input bias at +1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..data import Scaler
from ..errors import ConfigError, DimensionMismatchError, UnscaledInputError

GATE_COUNT = {"gru": 3, "lstm": 4}


def sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


@dataclass(frozen=True)
class RnnArch:
    """Architecture description; dims are per time step."""

    cell: str = "gru"
    state_dim: int = 5
    input_dim: int = 10
    hidden_dim: int = 48
    num_layers: int = 1
    dropout: float = 0.0

    def __post_init__(self) -> None:
        if self.cell not in GATE_COUNT:
            raise ConfigError(f"cell must be one of {sorted(GATE_COUNT)}")
        if min(self.state_dim, self.input_dim, self.hidden_dim, self.num_layers) < 1:
            raise ConfigError("all dimensions must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    def layer_in_dim(self, layer: int) -> int:
        return self.state_dim + self.input_dim if layer == 0 else self.hidden_dim

    def to_dict(self) -> dict:
        return {"cell": self.cell, "state_dim": self.state_dim,
                "input_dim": self.input_dim, "hidden_dim": self.hidden_dim,
                "num_layers": self.num_layers, "dropout": self.dropout}

    @classmethod
    def from_dict(cls, d: dict) -> "RnnArch":
        return cls(**d)


@dataclass
class LayerParams:
    w_ih: np.ndarray     # (gates*H, in_dim)
    w_hh: np.ndarray     # (gates*H, H)
    b_ih: np.ndarray     # (gates*H,)
    b_hh: np.ndarray     # (gates*H,)


@dataclass
class Hidden:
    """Per-layer hidden vectors; ``c`` is present only for LSTM models."""

    h: list[np.ndarray]
    c: list[np.ndarray] | None = None

    @classmethod
    def zeros(cls, arch: RnnArch, batch: int) -> "Hidden":
        h = [np.zeros((batch, arch.hidden_dim)) for _ in range(arch.num_layers)]
        c = [np.zeros((batch, arch.hidden_dim)) for _ in range(arch.num_layers)] \
            if arch.cell == "lstm" else None
        return cls(h=h, c=c)

    def copy(self) -> "Hidden":
        return Hidden(h=[a.copy() for a in self.h],
                      c=None if self.c is None else [a.copy() for a in self.c])

    @property
    def batch(self) -> int:
        return self.h[0].shape[0]


def _orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diag(r))


@dataclass
class RnnModel:
    arch: RnnArch
    layers: list[LayerParams]
    w_out: np.ndarray
    b_out: np.ndarray
    scaler: Scaler | None = None
    meta: dict = field(default_factory=dict)

    # -- parameter bookkeeping ------------------------------------------------

    def params(self) -> dict[str, np.ndarray]:
        """Name -> live array, in the canonical checkpoint order."""
        out: dict[str, np.ndarray] = {}
        for i, lp in enumerate(self.layers):
            out[f"layer{i}.w_ih"] = lp.w_ih
            out[f"layer{i}.w_hh"] = lp.w_hh
            out[f"layer{i}.b_ih"] = lp.b_ih
            out[f"layer{i}.b_hh"] = lp.b_hh
        out["head.w"] = self.w_out
        out["head.b"] = self.b_out
        return out

    def recurrent_param_count(self) -> int:
        """Measured parameter count of the recurrent layers (head excluded)."""
        return sum(lp.w_ih.size + lp.w_hh.size + lp.b_ih.size + lp.b_hh.size
                   for lp in self.layers)

    def head_param_count(self) -> int:
        return self.w_out.size + self.b_out.size

    def param_count(self) -> int:
        return self.recurrent_param_count() + self.head_param_count()

    def copy_weights(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params().items()}

    def load_weights(self, weights: dict[str, np.ndarray]) -> None:
        own = self.params()
        if set(own) != set(weights):
            raise DimensionMismatchError("weight dict does not match the model")
        for k, v in own.items():
            if weights[k].shape != v.shape:
                raise DimensionMismatchError(f"shape mismatch for {k}")
            v[...] = weights[k]

    def clone(self) -> "RnnModel":
        m = RnnModel(arch=self.arch,
                     layers=[LayerParams(lp.w_ih.copy(), lp.w_hh.copy(),
                                         lp.b_ih.copy(), lp.b_hh.copy())
                             for lp in self.layers],
                     w_out=self.w_out.copy(), b_out=self.b_out.copy(),
                     scaler=self.scaler, meta=dict(self.meta))
        return m


def init_model(arch: RnnArch, seed: int | np.random.Generator = 0,
               scaler: Scaler | None = None) -> RnnModel:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    gates = GATE_COUNT[arch.cell]
    H = arch.hidden_dim
    layers = []
    for layer in range(arch.num_layers):
        d_in = arch.layer_in_dim(layer)
        bound = 1.0 / np.sqrt(d_in)
        w_ih = rng.uniform(-bound, bound, size=(gates * H, d_in))
        w_hh = np.vstack([_orthogonal(rng, H) for _ in range(gates)])
        b_ih = np.zeros(gates * H)
        b_hh = np.zeros(gates * H)
        if arch.cell == "lstm":
            b_ih[H:2 * H] = 1.0          # forget-gate bias
        layers.append(LayerParams(w_ih, w_hh, b_ih, b_hh))
    bound = 1.0 / np.sqrt(H)
    w_out = rng.uniform(-bound, bound, size=(arch.state_dim, H))
    b_out = np.zeros(arch.state_dim)
    return RnnModel(arch=arch, layers=layers, w_out=w_out, b_out=b_out, scaler=scaler)


# ---------------------------------------------------------------------------
# cell forward/backward
# ---------------------------------------------------------------------------

def gru_forward(lp: LayerParams, inp: np.ndarray, h_prev: np.ndarray):
    H = h_prev.shape[1]
    gi = inp @ lp.w_ih.T + lp.b_ih
    gh = h_prev @ lp.w_hh.T + lp.b_hh
    z = sigmoid(gi[:, :H] + gh[:, :H])
    r = sigmoid(gi[:, H:2 * H] + gh[:, H:2 * H])
    ghc = gh[:, 2 * H:]
    g = np.tanh(gi[:, 2 * H:] + r * ghc)
    h = (1.0 - z) * h_prev + z * g
    return h, (inp, h_prev, z, r, g, ghc)


def gru_backward(lp: LayerParams, cache, dh: np.ndarray, grads: dict | None,
                 prefix: str = ""):
    """Backprop one GRU step. Returns (d_input, d_h_prev); accumulates into grads."""
    inp, h_prev, z, r, g, ghc = cache
    dz = dh * (g - h_prev)
    daz = dz * z * (1.0 - z)
    dg = dh * z
    dag = dg * (1.0 - g * g)
    dghc = dag * r
    dr = dag * ghc
    dar = dr * r * (1.0 - r)
    dgi = np.concatenate([daz, dar, dag], axis=1)
    dgh = np.concatenate([daz, dar, dghc], axis=1)
    d_input = dgi @ lp.w_ih
    d_h_prev = dh * (1.0 - z) + dgh @ lp.w_hh
    if grads is not None:
        grads[prefix + "w_ih"] += dgi.T @ inp
        grads[prefix + "w_hh"] += dgh.T @ h_prev
        grads[prefix + "b_ih"] += dgi.sum(axis=0)
        grads[prefix + "b_hh"] += dgh.sum(axis=0)
    return d_input, d_h_prev


def lstm_forward(lp: LayerParams, inp: np.ndarray, h_prev: np.ndarray,
                 c_prev: np.ndarray):
    H = h_prev.shape[1]
    a = inp @ lp.w_ih.T + lp.b_ih + h_prev @ lp.w_hh.T + lp.b_hh
    i = sigmoid(a[:, :H])
    f = sigmoid(a[:, H:2 * H])
    o = sigmoid(a[:, 2 * H:3 * H])
    g = np.tanh(a[:, 3 * H:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (inp, h_prev, c_prev, i, f, o, g, tc)


def lstm_backward(lp: LayerParams, cache, dh: np.ndarray, dc: np.ndarray,
                  grads: dict | None, prefix: str = ""):
    """Backprop one LSTM step. Returns (d_input, d_h_prev, d_c_prev)."""
    inp, h_prev, c_prev, i, f, o, g, tc = cache
    do = dh * tc
    dct = dc + dh * o * (1.0 - tc * tc)
    di = dct * g
    df = dct * c_prev
    dg = dct * i
    da = np.concatenate([di * i * (1.0 - i), df * f * (1.0 - f),
                         do * o * (1.0 - o), dg * (1.0 - g * g)], axis=1)
    d_input = da @ lp.w_ih
    d_h_prev = da @ lp.w_hh
    d_c_prev = dct * f
    if grads is not None:
        grads[prefix + "w_ih"] += da.T @ inp
        grads[prefix + "w_hh"] += da.T @ h_prev
        grads[prefix + "b_ih"] += da.sum(axis=0)
        grads[prefix + "b_hh"] += da.sum(axis=0)
    return d_input, d_h_prev, d_c_prev


# ---------------------------------------------------------------------------
# stacked step and public single-step forward
# ---------------------------------------------------------------------------

def step_stack(model: RnnModel, inp: np.ndarray, hidden: Hidden,
               drop_masks: list[np.ndarray] | None = None, collect: bool = False):
    """Advance every layer one step.

    Returns (top hidden output, new Hidden, caches or None). ``drop_masks``
    are pre-scaled inverted-dropout masks applied to the hidden vector passed
    up between layers (never to the recurrent path or the head input).
    """
    lstm = model.arch.cell == "lstm"
    cur = inp
    new_h: list[np.ndarray] = []
    new_c: list[np.ndarray] = []
    caches = [] if collect else None
    last = model.arch.num_layers - 1
    for l, lp in enumerate(model.layers):
        if lstm:
            h, c, cache = lstm_forward(lp, cur, hidden.h[l], hidden.c[l])
            new_c.append(c)
        else:
            h, cache = gru_forward(lp, cur, hidden.h[l])
        if collect:
            caches.append(cache)
        cur = h
        if drop_masks is not None and l < last:
            cur = h * drop_masks[l]
        new_h.append(h)
    out = Hidden(h=new_h, c=new_c if lstm else None)
    return cur, out, caches


def head_forward(model: RnnModel, h_top: np.ndarray) -> np.ndarray:
    return h_top @ model.w_out.T + model.b_out


def rnn_forward(model: RnnModel, x: np.ndarray, u: np.ndarray,
                hidden: Hidden | None = None):
    """One guarded step: scaled (x, u, hidden) -> (next-state prediction, hidden).

    Accepts a single sample (1-D x/u) or a batch (2-D). Inputs must already be
    scaled; anything beyond [-1, 1] by more than 1e-9 raises UnscaledInputError.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    ub = u[None, :] if single else u
    if xb.shape[1] != model.arch.state_dim or ub.shape[1] != model.arch.input_dim:
        raise DimensionMismatchError(
            f"expected state dim {model.arch.state_dim} and input dim "
            f"{model.arch.input_dim}, got {xb.shape[1]} and {ub.shape[1]}")
    if xb.shape[0] != ub.shape[0]:
        raise DimensionMismatchError("x and u batch sizes differ")
    worst = max(np.abs(xb).max(initial=0.0), np.abs(ub).max(initial=0.0))
    if worst > 1.0 + 1e-9:
        raise UnscaledInputError(
            f"input magnitude {worst:.3g} outside [-1, 1]; scale inputs first")
    if hidden is None:
        hidden = Hidden.zeros(model.arch, xb.shape[0])
    elif hidden.batch != xb.shape[0]:
        raise DimensionMismatchError("hidden batch size does not match inputs")
    top, new_hidden, _ = step_stack(model, np.concatenate([xb, ub], axis=1), hidden)
    pred = head_forward(model, top)
    return (pred[0], new_hidden) if single else (pred, new_hidden)


def rollout(model: RnnModel, x_seq: np.ndarray, u_seq: np.ndarray, n_w: int,
            n_p: int, hidden_mode: str = "propagate") -> np.ndarray:
    """Warm up on measured states, then predict ``n_p`` steps in closed loop.

    The first ``n_w`` steps feed measured (x, u) pairs to build the hidden
    state; the prediction is seeded with the measured state at step ``n_w``
    and then feeds back its own outputs. A windowed dataset built with
    prediction parameter n_p supplies targets for n_p + 1 rollout predictions.

    hidden_mode: "propagate" updates the hidden state through the prediction
    loop, "freeze" holds it at its warmed value, "zero" discards the warm-up
    and starts the prediction from zero hidden state.
    """
    if hidden_mode not in ("propagate", "freeze", "zero"):
        raise ConfigError(f"unknown hidden_mode {hidden_mode!r}")
    if n_w < 1 or n_p < 0:
        raise ConfigError("need n_w >= 1 and n_p >= 0")
    x_seq = np.asarray(x_seq, dtype=float)
    u_seq = np.asarray(u_seq, dtype=float)
    single = x_seq.ndim == 2
    if single:
        x_seq = x_seq[None]
        u_seq = u_seq[None]
    B = x_seq.shape[0]
    if x_seq.shape[1] < n_w + 1 or u_seq.shape[1] < n_w + n_p:
        raise DimensionMismatchError(
            f"need x over {n_w + 1} steps and u over {n_w + n_p} steps, got "
            f"{x_seq.shape[1]} and {u_seq.shape[1]}")
    hidden = Hidden.zeros(model.arch, B)
    for k in range(n_w):
        inp = np.concatenate([x_seq[:, k], u_seq[:, k]], axis=1)
        _, hidden, _ = step_stack(model, inp, hidden)
    preds = np.zeros((B, n_p, model.arch.state_dim))
    if n_p == 0:
        return preds[0] if single else preds
    if hidden_mode == "zero":
        hidden = Hidden.zeros(model.arch, B)
    frozen = hidden.copy() if hidden_mode == "freeze" else None
    x_hat = x_seq[:, n_w]
    for j in range(n_p):
        inp = np.concatenate([x_hat, u_seq[:, n_w + j]], axis=1)
        if hidden_mode == "freeze":
            top, _, _ = step_stack(model, inp, frozen)
        else:
            top, hidden, _ = step_stack(model, inp, hidden)
        x_hat = head_forward(model, top)
        preds[:, j] = x_hat
    return preds[0] if single else preds
