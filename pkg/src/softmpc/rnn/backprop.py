"""Hand-derived gradients for the warm-up/self-loop training loss.

The forward pass mirrors the training rollout: n_w teacher-forced warm-up
steps, then P self-loop steps whose inputs are the model's own previous
predictions (the first is seeded with the measured state at step n_w). The
loss is the mean squared error of the P predictions only, but gradients flow
through the entire unroll: through the fed-back predictions, through the
hidden chain across the prediction window, and through the warm-up steps via
the hidden state they leave behind.
"""

from __future__ import annotations

import numpy as np

from ..errors import DimensionMismatchError
from .model import (
    Hidden,
    RnnModel,
    gru_backward,
    gru_forward,
    head_forward,
    lstm_backward,
    lstm_forward,
)


def mse(pred: np.ndarray, target: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise DimensionMismatchError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff))


def zero_grads(model: RnnModel) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in model.params().items()}


def make_dropout_masks(model: RnnModel, batch: int, steps: int,
                       rng: np.random.Generator) -> list[list[np.ndarray]] | None:
    """Inverted-dropout masks per step and inter-layer gap, or None when unused."""
    p = model.arch.dropout
    L = model.arch.num_layers
    if p <= 0.0 or L < 2:
        return None
    H = model.arch.hidden_dim
    keep = 1.0 - p
    return [[(rng.uniform(size=(batch, H)) < keep) / keep for _ in range(L - 1)]
            for _ in range(steps)]


def loss_and_grads(model: RnnModel, x: np.ndarray, u: np.ndarray, y: np.ndarray,
                   n_w: int, masks: list[list[np.ndarray]] | None = None):
    """Training loss and exact parameter gradients for one batch of windows.

    x: (B, >= n_w+1, dx) scaled measured states, u: (B, >= n_w+P, du) scaled
    inputs, y: (B, P, dx) targets for the P self-loop predictions.
    Returns (loss, grads dict keyed like model.params(), predictions (B,P,dx)).
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 3 or u.ndim != 3 or y.ndim != 3:
        raise DimensionMismatchError("x, u, y must be 3-D batched arrays")
    B, P = y.shape[0], y.shape[1]
    if P < 1:
        raise DimensionMismatchError("need at least one prediction target")
    T = n_w + P
    if x.shape[0] != B or u.shape[0] != B:
        raise DimensionMismatchError("batch sizes differ")
    if x.shape[1] < n_w + 1 or u.shape[1] < T:
        raise DimensionMismatchError(
            f"need x over {n_w + 1} and u over {T} steps, got "
            f"{x.shape[1]} and {u.shape[1]}")
    lstm = model.arch.cell == "lstm"
    L = model.arch.num_layers

    # ---- forward, caching per-step cell internals --------------------------
    hidden = Hidden.zeros(model.arch, B)
    step_caches: list[list] = []
    head_inputs: list[np.ndarray] = []
    preds = np.zeros((B, P, model.arch.state_dim))
    x_hat: np.ndarray | None = None
    for k in range(T):
        if k < n_w:
            x_in = x[:, k]
        elif k == n_w:
            x_in = x[:, n_w]           # prediction seeded with a measurement
        else:
            x_in = x_hat
        inp = np.concatenate([x_in, u[:, k]], axis=1)
        cur = inp
        caches = []
        new_h: list[np.ndarray] = []
        new_c: list[np.ndarray] = []
        for l, lp in enumerate(model.layers):
            if lstm:
                h, c, cache = lstm_forward(lp, cur, hidden.h[l], hidden.c[l])
                new_c.append(c)
            else:
                h, cache = gru_forward(lp, cur, hidden.h[l])
            caches.append(cache)
            new_h.append(h)
            cur = h
            if masks is not None and l < L - 1:
                cur = h * masks[k][l]
        hidden = Hidden(h=new_h, c=new_c if lstm else None)
        step_caches.append(caches)
        if k >= n_w:
            head_inputs.append(new_h[-1])
            x_hat = head_forward(model, new_h[-1])
            preds[:, k - n_w] = x_hat

    diff = preds - y
    loss = float(np.mean(diff * diff))
    dpred = (2.0 / diff.size) * diff

    # ---- backward -----------------------------------------------------------
    grads = zero_grads(model)
    H = model.arch.hidden_dim
    dh_carry = [np.zeros((B, H)) for _ in range(L)]
    dc_carry = [np.zeros((B, H)) for _ in range(L)] if lstm else None
    dx_feedback: np.ndarray | None = None    # grad w.r.t. the fed-back prediction
    dx_dim = model.arch.state_dim
    for k in range(T - 1, -1, -1):
        if k >= n_w:
            dout = dpred[:, k - n_w].copy()
            if dx_feedback is not None:
                dout += dx_feedback
            grads["head.w"] += dout.T @ head_inputs[k - n_w]
            grads["head.b"] += dout.sum(axis=0)
            dh_carry[L - 1] = dh_carry[L - 1] + dout @ model.w_out
        d_from_above: np.ndarray | None = None
        for l in range(L - 1, -1, -1):
            dh = dh_carry[l]
            if d_from_above is not None:
                if masks is not None and l < L - 1:
                    dh = dh + d_from_above * masks[k][l]
                else:
                    dh = dh + d_from_above
            prefix = f"layer{l}."
            if lstm:
                d_input, d_h_prev, d_c_prev = lstm_backward(
                    model.layers[l], step_caches[k][l], dh, dc_carry[l], grads, prefix)
                dc_carry[l] = d_c_prev
            else:
                d_input, d_h_prev = gru_backward(
                    model.layers[l], step_caches[k][l], dh, grads, prefix)
            dh_carry[l] = d_h_prev
            d_from_above = d_input
        # gradient w.r.t. the x part of the step input feeds the previous
        # prediction; at k == n_w the seed was a measurement, so it stops there
        dx_feedback = d_from_above[:, :dx_dim] if k > n_w else None
    return loss, grads, preds


def teacher_forced_loss_and_grads(model: RnnModel, x: np.ndarray, u: np.ndarray,
                                  hidden: Hidden,
                                  masks: list[list[np.ndarray]] | None = None):
    """Loss and gradients for one conventionally trained chunk.

    Every step consumes the measured state and predicts the next one; the loss
    covers every step of the chunk. The incoming hidden state is treated as a
    constant (no gradient flows into earlier chunks) and the hidden state after
    the last step is returned for the caller to hand to the next chunk.

    x: (B, K+1, dx) measured states (K inputs plus the final target),
    u: (B, K, du) inputs. Returns (loss, grads, final hidden).
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.ndim != 3 or u.ndim != 3:
        raise DimensionMismatchError("x and u must be 3-D batched arrays")
    B, K = u.shape[0], u.shape[1]
    if K < 1 or x.shape[1] != K + 1 or x.shape[0] != B:
        raise DimensionMismatchError("need x over K+1 steps and u over K steps")
    lstm = model.arch.cell == "lstm"
    L = model.arch.num_layers

    hidden = hidden.copy()
    step_caches: list[list] = []
    head_inputs: list[np.ndarray] = []
    preds = np.zeros((B, K, model.arch.state_dim))
    for k in range(K):
        inp = np.concatenate([x[:, k], u[:, k]], axis=1)
        cur = inp
        caches = []
        new_h: list[np.ndarray] = []
        new_c: list[np.ndarray] = []
        for l, lp in enumerate(model.layers):
            if lstm:
                h, c, cache = lstm_forward(lp, cur, hidden.h[l], hidden.c[l])
                new_c.append(c)
            else:
                h, cache = gru_forward(lp, cur, hidden.h[l])
            caches.append(cache)
            new_h.append(h)
            cur = h
            if masks is not None and l < L - 1:
                cur = h * masks[k][l]
        hidden = Hidden(h=new_h, c=new_c if lstm else None)
        step_caches.append(caches)
        head_inputs.append(new_h[-1])
        preds[:, k] = head_forward(model, new_h[-1])

    targets = x[:, 1:K + 1]
    diff = preds - targets
    loss = float(np.mean(diff * diff))
    dpred = (2.0 / diff.size) * diff

    grads = zero_grads(model)
    Hd = model.arch.hidden_dim
    dh_carry = [np.zeros((B, Hd)) for _ in range(L)]
    dc_carry = [np.zeros((B, Hd)) for _ in range(L)] if lstm else None
    for k in range(K - 1, -1, -1):
        dout = dpred[:, k]
        grads["head.w"] += dout.T @ head_inputs[k]
        grads["head.b"] += dout.sum(axis=0)
        dh_carry[L - 1] = dh_carry[L - 1] + dout @ model.w_out
        d_from_above: np.ndarray | None = None
        for l in range(L - 1, -1, -1):
            dh = dh_carry[l]
            if d_from_above is not None:
                if masks is not None and l < L - 1:
                    dh = dh + d_from_above * masks[k][l]
                else:
                    dh = dh + d_from_above
            prefix = f"layer{l}."
            if lstm:
                d_input, d_h_prev, d_c_prev = lstm_backward(
                    model.layers[l], step_caches[k][l], dh, dc_carry[l], grads, prefix)
                dc_carry[l] = d_c_prev
            else:
                d_input, d_h_prev = gru_backward(
                    model.layers[l], step_caches[k][l], dh, grads, prefix)
            dh_carry[l] = d_h_prev
            d_from_above = d_input
    return loss, grads, hidden


def teacher_forced_loss(model: RnnModel, x: np.ndarray, u: np.ndarray,
                        hidden: Hidden) -> tuple[float, Hidden]:
    """Validation-side teacher-forced chunk loss (no gradients, no dropout)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    B, K = u.shape[0], u.shape[1]
    from .model import step_stack
    hidden = hidden.copy()
    preds = np.zeros((B, K, model.arch.state_dim))
    for k in range(K):
        inp = np.concatenate([x[:, k], u[:, k]], axis=1)
        top, hidden, _ = step_stack(model, inp, hidden)
        preds[:, k] = head_forward(model, top)
    return mse(preds, x[:, 1:K + 1]), hidden
