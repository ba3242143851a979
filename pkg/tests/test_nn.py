import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedsynth import nn
from fedsynth.gradcheck import LAYER_KINDS, check_layer, check_loss, random_layer_case
from fedsynth.params import ParamSet


def naive_matmul(w, x):
    out = np.zeros((x.shape[0], w.shape[0]))
    for n in range(x.shape[0]):
        for o in range(w.shape[0]):
            acc = 0.0
            for i in range(w.shape[1]):
                acc += w[o, i] * x[n, i]
            out[n, o] = acc
    return out


def test_conv_identity_kernel_is_bitwise_identity(rng):
    conv = nn.Conv2d(1, 1, 1, rng)
    conv.params["weight"][...] = 1.0
    conv.params["bias"][...] = 0.0
    x = rng.random((2, 1, 7, 5)).astype(np.float32)
    assert conv.forward(x).tobytes() == x.tobytes()


def test_conv_all_ones_hand_sum(rng):
    conv = nn.Conv2d(1, 1, 2, rng)
    conv.params["weight"][...] = 1.0
    conv.params["bias"][...] = 0.0
    out = conv.forward(np.array([[[[1, 2], [3, 4]]]], np.float32))
    assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 10.0


@pytest.mark.parametrize("seed", range(5))
def test_dense_matches_naive_oracle(seed):
    rng = np.random.default_rng(seed)
    layer = nn.Dense(7, 5, rng)
    x = rng.normal(size=(3, 7)).astype(np.float32)
    expected = naive_matmul(layer.params["weight"].astype(np.float64), x.astype(np.float64)) + layer.params["bias"]
    np.testing.assert_allclose(layer.forward(x), expected, rtol=1e-5, atol=1e-6)


def test_relu_backward_piecewise():
    dx, _ = nn.ReLU().backward(np.array([-1.0, 2.0]), np.array([1.0, 1.0]))
    assert dx.tolist() == [0.0, 1.0]


def test_sigmoid_backward_at_zero():
    dx, _ = nn.Sigmoid().backward(np.array([0.0]), np.array([1.0]))
    assert dx[0] == 0.25


@pytest.mark.parametrize("kind", LAYER_KINDS)
@pytest.mark.parametrize("seed", range(20))
def test_layer_gradients_finite_difference(kind, seed):
    rng = np.random.default_rng(seed)
    layer, x = random_layer_case(kind, rng)
    errors = check_layer(layer, x, rng)
    assert max(errors.values()) < 1e-4, errors


def test_backward_leaves_params_untouched(rng):
    layer = nn.Conv2d(2, 3, 3, rng, padding=1)
    before = {k: v.copy() for k, v in layer.params.items()}
    x = rng.normal(size=(2, 2, 5, 5)).astype(np.float32)
    layer.backward(x, layer.forward(x))
    for k in before:
        assert before[k].tobytes() == layer.params[k].tobytes()


def test_shape_mismatch_names_layer_and_shapes(rng):
    with pytest.raises(nn.ShapeError, match="conv2d.*\\(1, 3, 8, 8\\)"):
        nn.Conv2d(2, 3, 3, rng).forward(np.zeros((1, 3, 8, 8), np.float32))
    with pytest.raises(nn.ShapeError):
        nn.Dense(4, 2, rng).backward(np.zeros((1, 4), np.float32), np.zeros((1, 3), np.float32))


def test_nonfinite_upstream_gradient_rejected():
    with pytest.raises(nn.NonFiniteError):
        nn.Tanh().backward(np.zeros(3), np.array([0.0, np.nan, 1.0]))


@given(
    c_in=st.integers(1, 3),
    c_out=st.integers(1, 3),
    k=st.integers(1, 4),
    stride=st.integers(1, 3),
    padding=st.integers(0, 2),
    side=st.integers(4, 9),
    transpose=st.booleans(),
)
def test_shape_function_matches_actual_output(c_in, c_out, k, stride, padding, side, transpose):
    rng = np.random.default_rng(0)
    cls = nn.ConvTranspose2d if transpose else nn.Conv2d
    layer = cls(c_in, c_out, k, rng, stride=stride, padding=padding)
    shape = (2, c_in, side, side)
    try:
        expected = layer.output_shape(shape)
    except nn.ShapeError:
        return
    assert layer.forward(np.zeros(shape, np.float32)).shape == expected


# ------------------------------------------------------------------ losses


def test_bce_examples():
    value, _ = nn.bce_loss(np.array([0.5]), np.array([1]))
    assert value == pytest.approx(np.log(2), abs=1e-12)
    value, _ = nn.bce_loss(np.array([1 - 1e-7]), np.array([1]))
    assert value == pytest.approx(1e-7, rel=1e-3)


def test_bce_rejects_non_binary_labels():
    with pytest.raises(ValueError):
        nn.bce_loss(np.array([0.3]), np.array([2]))


@pytest.mark.parametrize("seed", range(20))
def test_bce_gradient_finite_difference(seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.05, 0.95, size=16)
    y = rng.integers(0, 2, size=16)
    assert check_loss(nn.bce_loss, p, y) < 1e-4


def test_mse_examples():
    assert nn.mse_loss(np.ones(3), np.ones(3))[0] == 0.0
    assert nn.mse_loss(np.array([1.0, 1.0]), np.array([0.0, 0.0]))[0] == 1.0
    with pytest.raises(nn.ShapeError):
        nn.mse_loss(np.ones(2), np.ones(3))


@pytest.mark.parametrize("seed", range(20))
def test_mse_gradient_finite_difference(seed):
    rng = np.random.default_rng(seed)
    assert check_loss(nn.mse_loss, rng.normal(size=(4, 4)), rng.normal(size=(4, 4))) < 1e-4


# --------------------------------------------------------------- optimizer


def test_adamw_zero_grad_no_decay_is_noop():
    p = ParamSet({"w": np.array([1.5, -2.0], np.float32)})
    before = p.copy()
    opt = nn.AdamW(lr=0.1, weight_decay=0.0)
    opt.step(p, {"w": np.zeros(2, np.float32)})
    assert p.equal(before)


def test_adamw_single_step_hand_computed():
    p = ParamSet({"w": np.array([1.0])})
    nn.AdamW(lr=0.1, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0).step(p, {"w": np.array([1.0])})
    assert abs(p["w"][0] - 0.9) < 1e-7


def test_adamw_decay_only():
    p = ParamSet({"w": np.array([2.0, -3.0])})
    nn.AdamW(lr=0.1, weight_decay=0.01).step(p, {"w": np.zeros(2)})
    np.testing.assert_allclose(p["w"], np.array([2.0, -3.0]) * (1 - 0.001), rtol=0, atol=1e-15)


def test_adamw_step_count_and_congruence():
    p = ParamSet({"w": np.zeros((2, 2))})
    opt = nn.AdamW(lr=0.1)
    for i in range(3):
        opt.step(p, {"w": np.ones((2, 2))})
        assert opt.step_count == i + 1
        assert opt.m["w"].shape == opt.v["w"].shape == (2, 2)
    with pytest.raises(nn.ShapeError):
        opt.step(p, {"w": np.ones(3)})


def test_adamw_converges_on_quadratic():
    p = ParamSet({"w": np.array([1.0])})
    opt = nn.AdamW(lr=0.05, weight_decay=0.0)
    for _ in range(500):
        opt.step(p, {"w": 2 * p["w"]})
    assert abs(p["w"][0]) < 1e-2


def test_forward_is_deterministic(rng):
    model = nn.Sequential([("c", nn.Conv2d(1, 4, 3, rng, padding=1)), ("r", nn.ReLU()), ("p", nn.AvgPool2d(2))])
    x = rng.random((3, 1, 8, 8)).astype(np.float32)
    assert model(x).tobytes() == model(x).tobytes()
