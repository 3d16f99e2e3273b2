"""Cell equations, initialization, parameter counts, rollout, checkpoints."""

import numpy as np
import pytest

from softmpc.data import Scaler
from softmpc.errors import (
    CheckpointError,
    ConfigError,
    DimensionMismatchError,
    UnscaledInputError,
)
from softmpc.rnn import (
    GATE_COUNT,
    Hidden,
    RnnArch,
    init_model,
    load_checkpoint,
    rnn_forward,
    rollout,
    save_checkpoint,
    step_stack,
)
from softmpc.rnn.model import gru_forward, head_forward, lstm_forward


def zeroed(model):
    for arr in model.params().values():
        arr[...] = 0.0
    return model


def make_model(cell="gru", dx=2, du=1, H=3, L=1, seed=0, dropout=0.0):
    arch = RnnArch(cell=cell, state_dim=dx, input_dim=du, hidden_dim=H,
                   num_layers=L, dropout=dropout)
    return init_model(arch, seed=seed)


# ---------------------------------------------------------------------------
# cell equations pinned by hand-computed examples
# ---------------------------------------------------------------------------

def test_zero_weight_gru_halves_hidden_state():
    # all weights zero: z = r = sigmoid(0) = 1/2, candidate g = tanh(0) = 0,
    # so h = (1 - z) h' = h'/2 exactly
    model = zeroed(make_model("gru", H=4))
    h_prev = np.ones((1, 4))
    h, _ = gru_forward(model.layers[0], np.zeros((1, 3)), h_prev)
    np.testing.assert_array_equal(h, 0.5 * np.ones((1, 4)))


def test_zero_weight_lstm_example():
    # all weights zero: i = f = o = 1/2, g = 0, c = c'/2, h = tanh(c)/2
    model = zeroed(make_model("lstm", H=4))
    c_prev = np.ones((1, 4))
    h, c, _ = lstm_forward(model.layers[0], np.zeros((1, 3)),
                           np.zeros((1, 4)), c_prev)
    np.testing.assert_allclose(c, 0.5, rtol=0, atol=0)
    np.testing.assert_allclose(h, 0.5 * np.tanh(0.5), rtol=0, atol=0)


def test_gru_reset_gate_scales_recurrent_candidate_bias():
    # only the recurrent candidate bias is nonzero; with all gates at 1/2 the
    # candidate must see r * c_g, i.e. g = tanh(c_g / 2), which pins down the
    # convention that the reset gate multiplies the whole recurrent
    # contribution including its bias
    H = 4
    model = zeroed(make_model("gru", H=H))
    cg = 0.8
    model.layers[0].b_hh[2 * H:] = cg
    h, _ = gru_forward(model.layers[0], np.zeros((1, 3)), np.zeros((1, H)))
    np.testing.assert_allclose(h, 0.5 * np.tanh(0.5 * cg), rtol=1e-15)


def test_gru_update_gate_blends_previous_state():
    # push the update gate hard open via its input bias: z ~ 1, so h ~ g
    H = 2
    model = zeroed(make_model("gru", H=H))
    model.layers[0].b_ih[:H] = 50.0        # update-gate bias
    model.layers[0].b_ih[2 * H:] = 0.3     # candidate bias
    h, _ = gru_forward(model.layers[0], np.zeros((1, 3)), np.full((1, H), 0.9))
    np.testing.assert_allclose(h, np.tanh(0.3), rtol=1e-12)


def test_lstm_forget_gate_keeps_cell():
    # saturate the forget gate and close input/output: the cell is preserved
    H = 2
    model = zeroed(make_model("lstm", H=H))
    lp = model.layers[0]
    lp.b_ih[:H] = -50.0          # input gate shut
    lp.b_ih[H:2 * H] = 50.0      # forget gate open
    c_prev = np.array([[0.3, -0.7]])
    h, c, _ = lstm_forward(lp, np.zeros((1, 3)), np.zeros((1, H)), c_prev)
    np.testing.assert_allclose(c, c_prev, rtol=1e-12)
    np.testing.assert_allclose(h, 0.5 * np.tanh(c_prev), rtol=1e-12)


# ---------------------------------------------------------------------------
# architecture, initialization, parameter counts
# ---------------------------------------------------------------------------

def closed_form_count(arch: RnnArch) -> int:
    gates = GATE_COUNT[arch.cell]
    total = 0
    for layer in range(arch.num_layers):
        d_in = arch.layer_in_dim(layer)
        total += gates * (arch.hidden_dim * (d_in + arch.hidden_dim)
                          + 2 * arch.hidden_dim)
    return total


def test_arch_validation():
    with pytest.raises(ConfigError):
        RnnArch(cell="elman")
    with pytest.raises(ConfigError):
        RnnArch(hidden_dim=0)
    with pytest.raises(ConfigError):
        RnnArch(dropout=1.0)


@pytest.mark.parametrize("seed", range(10))
def test_param_count_matches_closed_form(seed):
    rng = np.random.default_rng(seed)
    arch = RnnArch(cell=rng.choice(["gru", "lstm"]),
                   state_dim=int(rng.integers(1, 8)),
                   input_dim=int(rng.integers(1, 12)),
                   hidden_dim=int(rng.integers(1, 40)),
                   num_layers=int(rng.integers(1, 4)))
    model = init_model(arch, seed=seed)
    assert model.recurrent_param_count() == closed_form_count(arch)
    assert model.head_param_count() == arch.state_dim * arch.hidden_dim + arch.state_dim
    assert model.param_count() == model.recurrent_param_count() + model.head_param_count()


@pytest.mark.parametrize("H,L", [(4, 1), (16, 2), (48, 3)])
def test_gru_recurrent_params_are_three_quarters_of_lstm(H, L):
    kw = dict(state_dim=5, input_dim=10, hidden_dim=H, num_layers=L)
    gru = init_model(RnnArch(cell="gru", **kw), seed=0)
    lstm = init_model(RnnArch(cell="lstm", **kw), seed=0)
    assert 4 * gru.recurrent_param_count() == 3 * lstm.recurrent_param_count()


def test_init_recurrent_blocks_orthogonal_and_biases():
    model = make_model("lstm", dx=3, du=2, H=6, L=2, seed=5)
    H = 6
    for lp in model.layers:
        for gate in range(4):
            q = lp.w_hh[gate * H:(gate + 1) * H]
            np.testing.assert_allclose(q.T @ q, np.eye(H), atol=1e-10)
        np.testing.assert_array_equal(lp.b_hh, 0.0)
        np.testing.assert_array_equal(lp.b_ih[H:2 * H], 1.0)   # forget gate
        assert np.all(lp.b_ih[:H] == 0.0) and np.all(lp.b_ih[2 * H:] == 0.0)
    gru = make_model("gru", seed=5)
    np.testing.assert_array_equal(gru.layers[0].b_ih, 0.0)


def test_init_same_seed_bitwise_reproducible():
    a = make_model("gru", H=7, L=2, seed=9)
    b = make_model("gru", H=7, L=2, seed=9)
    for k, v in a.params().items():
        np.testing.assert_array_equal(v, b.params()[k])


def test_clone_and_load_weights_roundtrip():
    a = make_model("lstm", H=5, L=2, seed=3)
    b = a.clone()
    b.layers[0].w_ih += 1.0
    assert not np.array_equal(a.layers[0].w_ih, b.layers[0].w_ih)
    a.load_weights(b.copy_weights())
    np.testing.assert_array_equal(a.layers[0].w_ih, b.layers[0].w_ih)
    bad = b.copy_weights()
    bad.pop("head.b")
    with pytest.raises(DimensionMismatchError):
        a.load_weights(bad)


# ---------------------------------------------------------------------------
# guarded forward
# ---------------------------------------------------------------------------

def test_forward_rejects_unscaled_inputs():
    model = make_model()
    with pytest.raises(UnscaledInputError):
        rnn_forward(model, np.array([1.5, 0.0]), np.array([0.0]))
    with pytest.raises(UnscaledInputError):
        rnn_forward(model, np.zeros(2), np.array([-1.1]))
    # exactly on the boundary is fine
    rnn_forward(model, np.array([1.0, -1.0]), np.array([1.0]))


def test_forward_rejects_wrong_dims():
    model = make_model()
    with pytest.raises(DimensionMismatchError):
        rnn_forward(model, np.zeros(3), np.zeros(1))
    with pytest.raises(DimensionMismatchError):
        rnn_forward(model, np.zeros((2, 2)), np.zeros((3, 1)))


def test_forward_single_equals_batch_row():
    # matmuls on different batch shapes may round the last ulp differently,
    # so parity is asserted at float resolution rather than bitwise
    model = make_model("lstm", H=6, L=2, seed=2)
    x = np.array([[0.1, -0.2], [0.4, 0.9]])
    u = np.array([[0.3], [-0.5]])
    batch_pred, batch_hidden = rnn_forward(model, x, u)
    single_pred, single_hidden = rnn_forward(model, x[0], u[0])
    np.testing.assert_allclose(single_pred, batch_pred[0], rtol=1e-13, atol=1e-16)
    np.testing.assert_allclose(single_hidden.h[0][0], batch_hidden.h[0][0],
                               rtol=1e-13, atol=1e-16)


def test_forward_threads_hidden_state():
    model = make_model("gru", seed=4)
    x = np.array([0.2, 0.1])
    u = np.array([0.5])
    p1, h1 = rnn_forward(model, x, u)
    p2, _ = rnn_forward(model, x, u, h1)
    assert not np.array_equal(p1, p2)     # state advanced, output changes


# ---------------------------------------------------------------------------
# rollout
# ---------------------------------------------------------------------------

def roll_inputs(model, n_w, n_p, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, size=(n_w + 1, model.arch.state_dim))
    u = rng.uniform(-1, 1, size=(n_w + n_p, model.arch.input_dim))
    return x, u


def test_rollout_zero_predictions_is_empty():
    model = make_model()
    x, u = roll_inputs(model, 3, 0)
    out = rollout(model, x, u, n_w=3, n_p=0)
    assert out.shape == (0, 2)


def test_rollout_matches_manual_self_loop():
    model = make_model("gru", dx=2, du=1, H=5, L=2, seed=6)
    n_w, n_p = 3, 4
    x, u = roll_inputs(model, n_w, n_p, seed=1)
    out = rollout(model, x, u, n_w=n_w, n_p=n_p)

    hidden = Hidden.zeros(model.arch, 1)
    for k in range(n_w):
        _, hidden = rnn_forward(model, x[None, k], u[None, k], hidden)
    x_hat = x[None, n_w]
    manual = []
    for j in range(n_p):
        x_hat, hidden = rnn_forward(model, x_hat, u[None, n_w + j], hidden)
        manual.append(x_hat[0])
    np.testing.assert_array_equal(out, np.array(manual))


def test_rollout_hidden_modes_agree_on_first_step_only():
    model = make_model("lstm", dx=2, du=2, H=6, L=2, seed=8)
    n_w, n_p = 4, 5
    x, u = roll_inputs(model, n_w, n_p, seed=2)
    prop = rollout(model, x, u, n_w, n_p, hidden_mode="propagate")
    froz = rollout(model, x, u, n_w, n_p, hidden_mode="freeze")
    zero = rollout(model, x, u, n_w, n_p, hidden_mode="zero")
    # the first self-loop step uses the warmed hidden state in both cases
    np.testing.assert_array_equal(prop[0], froz[0])
    assert not np.array_equal(prop[1:], froz[1:])
    # discarding the warm-up changes the very first prediction
    assert not np.array_equal(prop[0], zero[0])


def test_rollout_validates_arguments():
    model = make_model()
    x, u = roll_inputs(model, 3, 2)
    with pytest.raises(ConfigError):
        rollout(model, x, u, 3, 2, hidden_mode="weird")
    with pytest.raises(ConfigError):
        rollout(model, x, u, 0, 2)
    with pytest.raises(DimensionMismatchError):
        rollout(model, x[:2], u, 3, 2)
    with pytest.raises(DimensionMismatchError):
        rollout(model, x, u[:3], 3, 2)


def test_step_stack_dropout_masks_only_between_layers():
    model = make_model("gru", dx=2, du=1, H=4, L=2, seed=1, dropout=0.5)
    hidden = Hidden.zeros(model.arch, 1)
    inp = np.concatenate([np.full((1, 2), 0.3), np.full((1, 1), -0.2)], axis=1)
    kill = [np.zeros((1, 4))]        # zero out everything passed upward
    top_masked, hid_masked, _ = step_stack(model, inp, hidden, drop_masks=kill)
    # layer 1 saw a zero input, but its own recurrent state and the stored
    # layer-0 hidden state are untouched by the mask
    top_ref, hid_ref, _ = step_stack(model, inp, hidden)
    np.testing.assert_array_equal(hid_masked.h[0], hid_ref.h[0])
    assert not np.array_equal(top_masked, top_ref)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def demo_scaler():
    return Scaler(x_lo=np.array([-20.0, -50.0]), x_hi=np.array([20.0, 50.0]),
                  u_lo=np.zeros(1), u_hi=np.full(1, 0.7),
                  x_names=["q0", "q0d"], u_names=["p0"])


def test_checkpoint_roundtrip_bitwise(tmp_path):
    model = make_model("lstm", dx=2, du=1, H=5, L=2, seed=11)
    model.scaler = demo_scaler()
    model.meta = {"n_w": 25, "n_p": 3}
    history = {"train_loss": [0.5, 0.25], "val_loss": [0.6, 0.3], "lr": [1e-3, 1e-3]}
    save_checkpoint(model, tmp_path / "ckpt", history=history)
    loaded, hist2 = load_checkpoint(tmp_path / "ckpt")
    assert loaded.arch == model.arch
    assert hist2 == history
    assert loaded.meta == model.meta
    for k, v in model.params().items():
        np.testing.assert_array_equal(loaded.params()[k], v)
    np.testing.assert_array_equal(loaded.scaler.x_lo, model.scaler.x_lo)
    np.testing.assert_array_equal(loaded.scaler.u_hi, model.scaler.u_hi)
    # loaded model computes identically
    x = np.array([0.3, -0.4])
    u = np.array([0.2])
    p0, _ = rnn_forward(model, x, u)
    p1, _ = rnn_forward(loaded, x, u)
    np.testing.assert_array_equal(p0, p1)


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing")
    model = make_model()
    save_checkpoint(model, tmp_path / "c")
    blob = (tmp_path / "c" / "weights.bin").read_bytes()
    (tmp_path / "c" / "weights.bin").write_bytes(blob[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c")


def test_checkpoint_rejects_unknown_format(tmp_path):
    import json
    model = make_model()
    save_checkpoint(model, tmp_path / "c")
    man = json.loads((tmp_path / "c" / "manifest.json").read_text())
    man["format_version"] = 99
    (tmp_path / "c" / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c")


def test_head_forward_is_affine():
    model = make_model("gru", dx=3, du=1, H=4, seed=2)
    h = np.random.default_rng(0).normal(size=(2, 4))
    np.testing.assert_allclose(head_forward(model, h),
                               h @ model.w_out.T + model.b_out, rtol=0)
