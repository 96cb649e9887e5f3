import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dltdoa.nlos import build_classifier
from dltdoa.nn import (
    LSTM, Adam, AdamState, Conv1D, Dense, Dropout, EncoderDecoder, Flatten, InstanceNorm, LayerSpec, MaxPool1D,
    ReLU, Sequential, Sigmoid, Tanh, adam_step, binary_cross_entropy, check_model, load_checkpoint,
    mean_squared_error, numeric_gradient, relative_error, save_checkpoint,
)
from dltdoa.nn.checkpoint import CheckpointError, assign_parameters

RNG = np.random.default_rng


def _mse_to(target):
    return lambda out: mean_squared_error(out, target)


# ---------------------------------------------------------------- conv1d


def _conv_oracle(x, W, b):
    """Direct nested-loop 'same' convolution (cross-correlation) for one sample."""
    L, C_in = x.shape
    k, _, C_out = W.shape
    pad = k // 2
    out = np.zeros((L, C_out))
    for t in range(L):
        for o in range(C_out):
            acc = b[o]
            for j in range(k):
                src = t + j - pad
                if 0 <= src < L:
                    for c in range(C_in):
                        acc += x[src, c] * W[j, c, o]
            out[t, o] = acc
    return out


def test_conv_matches_loop_oracle():
    rng = RNG(0)
    conv = Conv1D(2, 4, 3, rng)
    conv.params["b"][:] = rng.normal(size=4)
    x = rng.normal(size=(1, 8, 2))
    assert np.allclose(conv.forward(x)[0], _conv_oracle(x[0], conv.params["W"], conv.params["b"]), atol=1e-12, rtol=0)


def test_conv_identity_kernel_sums_channels():
    conv = Conv1D(3, 1, 5, RNG(0))
    conv.params["W"][:] = 0.0
    conv.params["W"][2, :, 0] = 1.0
    x = RNG(1).normal(size=(2, 7, 3))
    assert np.allclose(conv.forward(x)[..., 0], x.sum(axis=2))


def test_conv_zero_input_gives_bias():
    conv = Conv1D(2, 3, 3, RNG(0))
    conv.params["b"][:] = [1.0, -2.0, 0.5]
    out = conv.forward(np.zeros((1, 6, 2)))
    assert np.array_equal(out[0], np.tile([1.0, -2.0, 0.5], (6, 1)))


def test_conv_rejects_bad_shapes():
    with pytest.raises(ValueError):
        Conv1D(2, 3, 4, RNG(0))
    with pytest.raises(ValueError):
        Conv1D(2, 3, 3, RNG(0)).forward(np.zeros((1, 5, 3)))


# ---------------------------------------------------------------- instance norm


def test_instance_norm_constant_channel_is_zero():
    out = InstanceNorm(1).forward(np.full((1, 10, 1), 4.2))
    assert np.allclose(out, 0.0)


def test_instance_norm_moments():
    x = RNG(2).normal(3.0, 5.0, size=(4, 50, 3))
    out = InstanceNorm(3).forward(x)
    assert np.all(np.abs(out.mean(axis=1)) < 1e-9)
    assert np.all(np.abs(out.var(axis=1) - 1.0) < 1e-3)


def test_instance_norm_scale_invariance():
    # eps is negligible next to a variance of ~100, so only the scale can differ
    x = RNG(3).normal(0.0, 10.0, size=(2, 30, 2))
    a = InstanceNorm(2).forward(x)
    b = InstanceNorm(2).forward(1000.0 * x)
    assert np.allclose(a, b, atol=1e-6, rtol=0)


# ---------------------------------------------------------------- max pool


def test_maxpool_examples():
    pool = MaxPool1D()
    assert pool.forward(np.array([1.0, 3.0, 2.0, 0.0])[None, :, None])[0, :, 0].tolist() == [3.0, 2.0]
    assert pool.forward(np.zeros((1, 200, 1))).shape[1] == 100
    assert pool.forward(np.zeros((1, 25, 1))).shape[1] == 12


def test_classifier_shape_chain():
    net = build_classifier(0, np.float64)
    chain = net.shape_chain((200, 1))
    pools = [chain[i + 1] for i, s in enumerate(net.specs()) if s.kind == "maxpool1d"]
    assert [p[0] for p in pools] == [100, 50, 25, 12]
    assert pools[-1] == (12, 256)
    kinds = [s.kind for s in net.specs()]
    assert kinds[-4:] == ["flatten", "dense", "dense", "sigmoid"]
    assert chain[kinds.index("flatten") + 1] == (3072,)
    assert chain[-3] == (64,) and chain[-1] == (1,)


# ---------------------------------------------------------------- lstm


def _np_sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def _lstm_scalar_oracle(x, W, U, b):
    """Unrolled recurrence with explicit scalar loops over units and gates."""
    T, D = x.shape
    H = U.shape[0]
    h, c = [0.0] * H, [0.0] * H
    out = []
    for t in range(T):
        z = [b[g] + sum(x[t, d] * W[d, g] for d in range(D)) + sum(h[k] * U[k, g] for k in range(H))
             for g in range(4 * H)]
        new_h, new_c = [], []
        for u in range(H):
            i, f = _np_sigmoid(z[u]), _np_sigmoid(z[H + u])
            g, o = math.tanh(z[2 * H + u]), _np_sigmoid(z[3 * H + u])
            cu = f * c[u] + i * g
            new_c.append(cu)
            new_h.append(o * math.tanh(cu))
        h, c = new_h, new_c
        out.append(list(h))
    return np.array(out)


def test_lstm_matches_scalar_oracle():
    rng = RNG(4)
    lstm = LSTM(3, 4, rng)
    x = rng.normal(size=(1, 3, 3))
    p = lstm.params
    assert np.allclose(lstm.forward(x)[0], _lstm_scalar_oracle(x[0], p["W"], p["U"], p["b"]), atol=1e-12, rtol=0)


def test_lstm_zero_weights_zero_output():
    lstm = LSTM(2, 5, RNG(0))
    for v in lstm.params.values():
        v[:] = 0.0
    assert np.array_equal(lstm.forward(np.zeros((2, 4, 2))), np.zeros((2, 4, 5)))


def test_lstm_single_step_matches_cell():
    rng = RNG(5)
    lstm = LSTM(3, 4, rng)
    x = rng.normal(size=(2, 1, 3))
    hs = lstm.forward(x)
    h, c = lstm.step(x[:, 0], (np.zeros((2, 4)), np.zeros((2, 4))))
    assert np.allclose(hs[:, 0], h) and np.allclose(lstm.final_state[1], c)


def test_lstm_forget_bias_initialised_to_one():
    lstm = LSTM(3, 4, RNG(0))
    assert np.all(lstm.params["b"][4:8] == 1.0)
    assert np.all(lstm.params["b"][:4] == 0.0) and np.all(lstm.params["b"][8:] == 0.0)


# ---------------------------------------------------------------- gradients


def _layer_cases():
    rng = RNG(6)
    return {
        "conv1d": (Sequential([Conv1D(2, 3, 3, rng)]), rng.normal(size=(2, 7, 2))),
        "instance_norm": (Sequential([InstanceNorm(3)]), rng.normal(size=(2, 6, 3))),
        "relu": (Sequential([ReLU()]), rng.normal(size=(3, 5)) + np.sign(rng.normal(size=(3, 5))) * 0.1),
        "maxpool1d": (Sequential([MaxPool1D()]), rng.permutation(28).reshape(1, 7, 4) * 0.1),
        "dense": (Sequential([Dense(4, 3, rng)]), rng.normal(size=(5, 4))),
        "sigmoid": (Sequential([Sigmoid()]), rng.normal(size=(3, 4))),
        "tanh": (Sequential([Tanh()]), rng.normal(size=(3, 4))),
        "flatten": (Sequential([Flatten(), Dense(12, 2, rng)]), rng.normal(size=(2, 4, 3))),
        "lstm": (Sequential([LSTM(3, 4, rng)]), rng.normal(size=(2, 5, 3))),
    }


@pytest.mark.parametrize("kind", list(_layer_cases()))
def test_layer_gradients_match_finite_differences(kind):
    model, x = _layer_cases()[kind]
    target = RNG(7).normal(size=model.forward(x).shape)
    errors = check_model(model, x, _mse_to(target))
    assert max(errors.values()) < 1e-4, errors


def test_dropout_gradient_with_fixed_mask():
    rng = RNG(8)
    drop = Dropout(0.3, rng)
    x = rng.normal(size=(4, 6))
    drop.fixed_mask = (rng.random(x.shape) >= 0.3) / 0.7
    model = Sequential([Dense(6, 3, rng), Dropout(0.0, rng)])
    model.layers.insert(0, drop)
    errors = check_model(model, x, _mse_to(rng.normal(size=(4, 3))), training=True)
    assert max(errors.values()) < 1e-4


def test_dropout_eval_is_identity():
    drop = Dropout(0.5, RNG(0))
    x = RNG(1).normal(size=(3, 4))
    assert np.array_equal(drop.forward(x, training=False), x)
    g = RNG(2).normal(size=(3, 4))
    assert np.array_equal(drop.backward(g), g)


def test_dropout_training_scales_survivors():
    x = np.ones((200, 50))
    y = Dropout(0.2, RNG(0)).forward(x, training=True)
    assert set(np.unique(y)) <= {0.0, 1.25}
    assert abs(y.mean() - 1.0) < 0.05


def test_relu_passes_positive_gradient():
    relu = ReLU()
    relu.forward(np.array([[0.5, 2.0, 3.0]]))
    g = np.array([[1.0, -2.0, 0.3]])
    assert np.array_equal(relu.backward(g), g)


@pytest.mark.parametrize("layer", [Dense(2, 2, RNG(0)), Conv1D(1, 1, 3, RNG(0)), InstanceNorm(1), MaxPool1D(),
                                   LSTM(1, 1, RNG(0)), ReLU(), Dropout(0.1, RNG(0))])
def test_backward_before_forward_raises(layer):
    with pytest.raises(RuntimeError):
        layer.backward(np.zeros((1, 2, 1)))


def test_classifier_end_to_end_gradient():
    # shortened input keeps the probe fast; the layer stack is the production one
    net = build_classifier(0, np.float64, input_length=48, filters=(4, 4, 6, 8), dense_units=5)
    x = RNG(9).normal(size=(2, 48, 1))
    errors = check_model(net, x, lambda p: binary_cross_entropy(p, np.array([[0.0], [1.0]])), per_tensor=6)
    assert max(errors.values()) < 1e-4, errors


@pytest.mark.slow
def test_full_size_classifier_gradient():
    net = build_classifier(0, np.float64)
    x = RNG(10).uniform(size=(1, 200, 1))
    errors = check_model(net, x, lambda p: binary_cross_entropy(p, np.array([[1.0]])), per_tensor=3)
    # a conv bias feeding instance norm has an exactly zero gradient, so its
    # relative error is pure finite-difference noise; check it absolutely
    for i, layer in enumerate(net.layers):
        if layer.kind == "conv1d":
            assert np.max(np.abs(layer.grads["b"])) < 1e-9
            errors.pop(f"{i}.b")
    assert max(errors.values()) < 1e-4, errors


def test_encoder_decoder_end_to_end_gradient():
    net = EncoderDecoder(8, 5, seed=0, units=(4, 5, 5, 6), head=7)
    x = RNG(11).normal(size=(2, 16, 8))
    target = RNG(12).normal(size=(2, 5, 2))
    errors = check_model(net, x, _mse_to(target), per_tensor=8)
    assert max(errors.values()) < 1e-4, errors


def test_encoder_decoder_output_shape():
    net = EncoderDecoder(8, 5, seed=0)
    assert net.forward(np.zeros((3, 16, 8))).shape == (3, 5, 2)
    with pytest.raises(ValueError):
        EncoderDecoder(8, 5, seed=0, units=(32, 32, 16, 64))


# ---------------------------------------------------------------- losses


def test_bce_values():
    assert binary_cross_entropy(np.array([0.5]), np.array([1.0]))[0] == pytest.approx(math.log(2))
    assert binary_cross_entropy(np.array([0.5, 0.5]), np.array([0.0, 1.0]))[0] == pytest.approx(math.log(2))
    assert binary_cross_entropy(np.array([1 - 1e-9, 1e-9]), np.array([1.0, 0.0]))[0] < 1e-6
    assert np.isfinite(binary_cross_entropy(np.array([0.0, 1.0]), np.array([1.0, 0.0]))[0])


def test_bce_gradient_matches_finite_differences():
    p = np.array([0.2, 0.7, 0.45])
    y = np.array([0.0, 1.0, 1.0])
    _, g = binary_cross_entropy(p, y)
    num = numeric_gradient(lambda: binary_cross_entropy(p, y)[0], p, 1e-6)
    assert np.max(relative_error(g, num)) < 1e-6


def test_mse_gradient_matches_finite_differences():
    rng = RNG(13)
    pred, target = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    _, g = mean_squared_error(pred, target)
    num = numeric_gradient(lambda: mean_squared_error(pred, target)[0], pred)
    assert np.max(relative_error(g, num)) < 1e-6


# ---------------------------------------------------------------- adam


def test_adam_zero_gradient_is_fixed_point():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, AdamState())
    assert np.array_equal(p["w"], [1.0, -2.0])


@given(st.lists(st.floats(1e-3, 1e3) | st.floats(-1e3, -1e-3), min_size=1, max_size=6))
def test_adam_first_step_is_lr_times_sign(gs):
    g = np.array(gs)
    p = {"w": np.zeros_like(g)}
    adam_step(p, {"w": g}, AdamState(), lr=1e-3)
    # m_hat / sqrt(v_hat) = g / |g| exactly, so only eps perturbs the step
    assert np.allclose(p["w"], -1e-3 * np.sign(g), rtol=1e-4, atol=0)


def test_adam_constant_gradient_moves_monotonically():
    p = {"w": np.array([0.0])}
    opt = Adam(p, lr=0.01)
    trace = []
    for _ in range(50):
        opt.step({"w": np.array([2.5])})
        trace.append(p["w"][0])
    assert np.all(np.diff(trace) < 0)


# ---------------------------------------------------------------- training behaviour


def _toy_problem():
    rng = RNG(14)
    x = rng.normal(size=(40, 3))
    y = (x @ np.array([1.0, -2.0, 0.5]) > 0).astype(float)[:, None]
    return x, y


def _train_toy(seed, steps=10):
    x, y = _toy_problem()
    rng = RNG(seed)
    net = Sequential([Dense(3, 8, rng), ReLU(), Dropout(0.1, RNG(seed + 1)), Dense(8, 1, rng), Sigmoid()])
    opt = Adam(net.named_parameters(), lr=0.01)
    losses = []
    for _ in range(steps):
        losses.append(binary_cross_entropy(net.forward(x, training=False), y)[0])
        p = net.forward(x, training=True)
        _, g = binary_cross_entropy(p, y)
        net.backward(g)
        opt.step(net.named_gradients())
    return net, losses


def test_full_batch_loss_non_increasing():
    x, y = _toy_problem()
    rng = RNG(15)
    net = Sequential([Dense(3, 8, rng), ReLU(), Dense(8, 1, rng), Sigmoid()])
    opt = Adam(net.named_parameters(), lr=0.01)
    losses = []
    for _ in range(10):
        p = net.forward(x)
        loss, g = binary_cross_entropy(p, y)
        losses.append(loss)
        net.backward(g)
        opt.step(net.named_gradients())
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_same_seed_same_weights():
    a, _ = _train_toy(3)
    b, _ = _train_toy(3)
    c, _ = _train_toy(4)
    pa, pb, pc = a.named_parameters(), b.named_parameters(), c.named_parameters()
    assert all(pa[k].tobytes() == pb[k].tobytes() for k in pa)
    assert any(pa[k].tobytes() != pc[k].tobytes() for k in pa)


# ---------------------------------------------------------------- specs and checkpoints


def test_layer_spec_validation():
    with pytest.raises(ValueError):
        LayerSpec("dropout", {"rate": 1.0})
    with pytest.raises(ValueError):
        LayerSpec("conv1d", {"filters": 0})
    with pytest.raises(ValueError):
        LayerSpec("attention")


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    net = build_classifier(3)
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, net.named_parameters(), {"trained": False})
    tensors, meta = load_checkpoint(path)
    assert meta == {"trained": False}
    for k, v in net.named_parameters().items():
        assert tensors[k].dtype == v.dtype and tensors[k].tobytes() == v.tobytes()
    save_checkpoint(tmp_path / "b.ckpt", net.named_parameters(), {"trained": False})
    assert path.read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "x.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    with pytest.raises(CheckpointError):
        assign_parameters({"a": np.zeros(2)}, {"a": np.zeros(3)})
    with pytest.raises(CheckpointError):
        assign_parameters({"a": np.zeros(2)}, {"b": np.zeros(2)})
