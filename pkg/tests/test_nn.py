import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from preqsel import nn
from preqsel.rng import Stream


def fd_check(spec, params, x, y, temperature=1.0, mode="eval", dropout_seed=0, h=1e-5):
    """Max relative error between backprop and central finite differences."""
    _, grads = nn.backward(spec, params, x, y, temperature, mode, dropout_seed, 0)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            lp, _ = nn.softmax_xent(nn.forward(spec, params, x, mode, dropout_seed, 0), y, temperature)
            flat[i] = old - h
            lm, _ = nn.softmax_xent(nn.forward(spec, params, x, mode, dropout_seed, 0), y, temperature)
            flat[i] = old
            num = (lp - lm) / (2 * h)
            err = abs(num - gflat[i]) / max(1e-6, abs(num) + abs(gflat[i]))
            worst = max(worst, err)
    return worst


def random_batch(spec, n, seed):
    s = Stream(seed, "test-batch")
    x = s.normal(n * spec.input_dim).reshape(n, spec.input_dim)
    y = s.integers(spec.num_classes, n)
    return x, y


def test_init_deterministic_and_seed_dependent():
    spec = nn.ModelSpec((5,), 3, (nn.Dense(7), nn.Dense(4, "tanh")))
    a = nn.init_params(spec, 1)
    b = nn.init_params(spec, 1)
    c = nn.init_params(spec, 2)
    assert all(np.array_equal(p, q) for p, q in zip(a, b))
    assert nn.params_digest(a) == nn.params_digest(b)
    assert any(not np.array_equal(p, q) for p, q in zip(a, c))


def test_logistic_regression_shapes():
    spec = nn.ModelSpec((64,), 10)
    params = nn.init_params(spec, 0)
    assert [p.shape for p in params] == [(64, 10), (10,)]
    assert np.all(params[1] == 0)


def test_glorot_bound():
    spec = nn.ModelSpec((30,), 2, (nn.Dense(50),))
    W = nn.init_params(spec, 3)[0]
    a = math.sqrt(6 / 80)
    assert np.abs(W).max() <= a
    assert np.abs(W).max() > 0.9 * a


@pytest.mark.parametrize(
    "layers, shape",
    [
        ((nn.Conv(3, 2), nn.Dense(4)), (6, 6, 1)),  # Dense straight after Conv
        ((nn.Conv(5, 2),), (4, 4, 1)),  # kernel larger than input
        ((nn.Conv(3, 2),), (16,)),  # Conv on flat input
        ((nn.Dropout(1.0),), (4,)),
    ],
)
def test_incompatible_specs_raise(layers, shape):
    with pytest.raises(nn.SpecError):
        nn.ModelSpec(shape, 3, layers)


def test_zero_params_give_zero_logits():
    spec = nn.ModelSpec((4,), 3, (nn.Dense(5),))
    params = [np.zeros_like(p) for p in nn.init_params(spec, 0)]
    x, _ = random_batch(spec, 6, 0)
    assert np.array_equal(nn.forward(spec, params, x), np.zeros((6, 3)))


def test_dropout_rate_zero_train_equals_eval():
    spec = nn.ModelSpec((4,), 3, (nn.Dense(8), nn.Dropout(0.0), nn.Dense(8)))
    params = nn.init_params(spec, 0)
    x, _ = random_batch(spec, 5, 1)
    assert np.array_equal(nn.forward(spec, params, x, "train", 9, 3), nn.forward(spec, params, x, "eval"))


def test_dropout_masks_keyed_by_seed_and_step():
    spec = nn.ModelSpec((4,), 3, (nn.Dense(32), nn.Dropout(0.5)))
    params = nn.init_params(spec, 0)
    x, _ = random_batch(spec, 5, 1)
    a = nn.forward(spec, params, x, "train", 7, 0)
    assert np.array_equal(a, nn.forward(spec, params, x, "train", 7, 0))
    assert not np.array_equal(a, nn.forward(spec, params, x, "train", 7, 1))
    assert not np.array_equal(a, nn.forward(spec, params, x, "eval"))


def test_hand_linear_model():
    spec = nn.ModelSpec((2,), 2)
    W = np.array([[1.0, -2.0], [0.5, 3.0]])
    b = np.array([0.25, -1.0])
    x = np.array([[2.0, -1.0]])
    # W^T x + b by hand: [1*2 + 0.5*-1 + 0.25, -2*2 + 3*-1 - 1]
    np.testing.assert_array_equal(nn.forward(spec, [W, b], x), [[1.75, -8.0]])


def test_softmax_xent_closed_forms():
    loss, probs = nn.softmax_xent(np.zeros((3, 7)), [0, 3, 6])
    assert loss == pytest.approx(math.log(7), abs=1e-15)
    loss, _ = nn.softmax_xent(np.array([[2.0, 0.0]]), [0])
    assert loss == pytest.approx(math.log1p(math.exp(-2)), rel=1e-14)
    _, probs = nn.softmax_xent(np.array([[5.0, -3.0, 1.0]]), [0], temperature=1e9)
    np.testing.assert_allclose(probs, 1 / 3, atol=1e-6)
    with pytest.raises(ValueError):
        nn.softmax_xent(np.zeros((1, 2)), [0], temperature=0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(2, 6), st.floats(0.05, 20), st.integers(0, 10_000))
def test_softmax_rows_sum_to_one(n, k, t, seed):
    z = 10 * Stream(seed).normal(n * k).reshape(n, k)
    y = Stream(seed, 1).integers(k, n)
    loss, probs = nn.softmax_xent(z, y, t)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    assert loss >= 0


def test_gradient_mlp_three_layers():
    spec = nn.ModelSpec((4,), 3, (nn.Dense(6), nn.Dense(5, "tanh"), nn.Dense(4)))
    params = nn.init_params(spec, 0)
    x, y = random_batch(spec, 5, 0)
    assert fd_check(spec, params, x, y) < 1e-4


def test_gradient_conv_and_dropout():
    spec = nn.ModelSpec((6, 6, 2), 3, (nn.Conv(3, 3, 1), nn.Conv(2, 2, 2, "tanh"), nn.Flatten(),
                                       nn.Dense(5), nn.Dropout(0.3)))
    params = nn.init_params(spec, 1)
    x, y = random_batch(spec, 3, 1)
    assert fd_check(spec, params, x, y, mode="train", dropout_seed=11) < 1e-4


def test_gradient_at_temperature_two():
    spec = nn.ModelSpec((3,), 4, (nn.Dense(5),))
    params = nn.init_params(spec, 2)
    x, y = random_batch(spec, 4, 2)
    assert fd_check(spec, params, x, y, temperature=2.0) < 1e-4
    # classifier-bias gradient at T=2 is half the T=1 one (chain rule through logits / T)
    g1 = nn.backward(spec, params, x, y, 1.0)[1][-1]
    g2 = nn.backward(spec, params, x, y, 2.0)[1][-1]
    p1 = nn.softmax_xent(nn.forward(spec, params, x), y, 1.0)[1]
    p2 = nn.softmax_xent(nn.forward(spec, params, x), y, 2.0)[1]
    onehot = np.eye(4)[y]
    np.testing.assert_allclose(g1, (p1 - onehot).mean(0), atol=1e-14)
    np.testing.assert_allclose(g2, (p2 - onehot).mean(0) / 2, atol=1e-14)


def test_zero_input_zero_params_bias_gradient():
    spec = nn.ModelSpec((3,), 4, (nn.Dense(5),))
    params = [np.zeros_like(p) for p in nn.init_params(spec, 0)]
    y = np.array([0, 1, 1, 3])
    _, grads = nn.backward(spec, params, np.zeros((4, 3)), y)
    expected = (np.full((4, 4), 0.25) - np.eye(4)[y]).mean(axis=0)
    np.testing.assert_allclose(grads[-1], expected, atol=1e-15)


def test_conv_matches_direct_loops():
    spec = nn.ModelSpec((5, 5, 2), 2, (nn.Conv(3, 4, 2, "none"),))
    params = nn.init_params(spec, 0)
    x, _ = random_batch(spec, 2, 0)
    xi = x.reshape(2, 5, 5, 2)
    W = params[0].reshape(3, 3, 2, 4)
    out = np.zeros((2, 2, 2, 4))
    for n in range(2):
        for i in range(2):
            for j in range(2):
                patch = xi[n, 2 * i:2 * i + 3, 2 * j:2 * j + 3, :]
                out[n, i, j] = np.einsum("abc,abcd->d", patch, W) + params[1]
    got = nn._im2col(xi, 3, 2) @ params[0] + params[1]
    np.testing.assert_allclose(got, out, atol=1e-12)


def test_shape_mismatch():
    spec = nn.ModelSpec((3,), 2)
    with pytest.raises(nn.ShapeError):
        nn.forward(spec, nn.init_params(spec, 0), np.zeros((2, 4)))


def test_spec_round_trip_and_width():
    spec = nn.ModelSpec((8, 8, 1), 10, (nn.Conv(3, 4), nn.Flatten(), nn.Dense(16), nn.Dropout(0.5)))
    assert nn.ModelSpec.from_dict(spec.to_dict()) == spec
    wide = spec.with_width(32)
    assert wide.layers[0].channels == 32 and wide.layers[2].width == 32
