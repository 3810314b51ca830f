import numpy as np
import pytest
from conftest import naive_conv3d

from stan.errors import ShapeError, StateError
from stan.layers import Conv3d, Linear, MaxPool3d, same_padding
from stan.tensor import finite_diff_grad, rel_error


def test_same_padding():
    assert same_padding(1) == (0, 0)
    assert same_padding(2) == (0, 1)
    assert same_padding(3) == (1, 1)
    assert same_padding(4) == (1, 2)


def test_conv_identity_kernel():
    conv = Conv3d(1, 1, 1)
    conv.weight.value[...] = 1.0
    x = np.random.default_rng(0).uniform(0.1, 1.0, (1, 1, 2, 3, 4))
    np.testing.assert_array_equal(conv.forward(x), x)


def test_conv_counting_example():
    conv = Conv3d(1, 1, 2, relu=False)
    conv.weight.value[...] = 1.0
    out = conv.forward(np.ones((1, 1, 2, 2, 2)))
    # extra padding sits on the high side, so voxel (0,0,0) sees the full 2^3 block
    assert out[0, 0, 0, 0, 0] == 8.0
    assert out[0, 0, 1, 1, 1] == 1.0


@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_conv_matches_loop_oracle(k):
    rng = np.random.default_rng(k)
    conv = Conv3d(2, 3, k, rng=rng, relu=False)
    conv.bias.value[...] = rng.standard_normal(3)
    x = rng.standard_normal((2, 2, 3, 4, 5))
    np.testing.assert_allclose(conv.forward(x), naive_conv3d(x, conv.weight.value, conv.bias.value),
                               atol=1e-12)


def test_conv_init_is_seeded_and_bounded():
    a = Conv3d(3, 4, 3, rng=np.random.default_rng(5))
    b = Conv3d(3, 4, 3, rng=np.random.default_rng(5))
    np.testing.assert_array_equal(a.weight.value, b.weight.value)
    assert np.abs(a.weight.value).max() <= np.sqrt(6 / (3 * 27))
    assert not a.bias.value.any()
    assert not Conv3d(3, 4, 3).weight.value.any()


def test_conv_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    conv = Conv3d(2, 3, 2, rng=rng)
    conv.bias.value[...] = 0.5
    conv.weight.value[...] = np.abs(conv.weight.value)
    x = rng.uniform(0.1, 1.0, (1, 2, 3, 4, 4))
    up = rng.standard_normal((1, 3, 3, 4, 4))

    def loss():
        return float(np.sum(conv.forward(x) * up))

    loss()
    assert conv.relu_margin() > 1e-3
    conv.weight.zero_grad()
    conv.bias.zero_grad()
    dx = conv.backward(up)
    num_x = finite_diff_grad(lambda v: loss(), x)
    num_w = finite_diff_grad(lambda v: loss(), conv.weight.value)
    num_b = finite_diff_grad(lambda v: loss(), conv.bias.value.reshape(1, 1, 1, 1, 3))
    assert rel_error(dx, num_x) < 1e-5
    assert rel_error(conv.weight.grad, num_w) < 1e-5
    assert rel_error(conv.bias.grad, num_b.ravel()) < 1e-5


def test_conv_errors():
    conv = Conv3d(2, 3, 2)
    with pytest.raises(StateError):
        conv.backward(np.zeros((1, 3, 2, 2, 2)))
    with pytest.raises(ShapeError):
        conv.forward(np.zeros((1, 3, 2, 2, 2)))
    with pytest.raises(ShapeError):
        Conv3d(0, 1, 1)


def test_pool_examples():
    x = np.random.default_rng(0).standard_normal((1, 2, 3, 3, 3))
    np.testing.assert_array_equal(MaxPool3d(1).forward(x), x)
    x = np.array([1.0, 5.0, 2.0, 3.0]).reshape(1, 1, 1, 2, 2)
    assert MaxPool3d(2).forward(x).item() == 5.0


def test_pool_tie_goes_to_first():
    pool = MaxPool3d(2)
    x = np.array([7.0, 7.0]).reshape(1, 1, 1, 1, 2)
    pool.forward(x)
    g = pool.backward(np.ones((1, 1, 1, 1, 1)))
    np.testing.assert_array_equal(g.ravel(), [1.0, 0.0])
    assert pool.tie_margin() == 0.0


def test_pool_ceil_mode_partial_windows():
    pool = MaxPool3d(2)
    x = -np.arange(27.0).reshape(1, 1, 3, 3, 3)
    out = pool.forward(x)
    assert out.shape == (1, 1, 2, 2, 2)
    assert out[0, 0, 1, 1, 1] == -26.0
    assert MaxPool3d.output_shape((1, 1, 5, 4, 1), 3) == (1, 1, 2, 2, 1)


def test_pool_gradient_routes_to_argmax():
    rng = np.random.default_rng(4)
    x = rng.permutation(48).astype(np.float64).reshape(1, 2, 2, 3, 4)
    pool = MaxPool3d(2)
    out = pool.forward(x)
    up = rng.standard_normal(out.shape)
    num = finite_diff_grad(lambda v: float(np.sum(pool.forward(v) * up)), x)
    pool.forward(x)
    assert rel_error(pool.backward(up), num) < 1e-8


def test_linear_gradients():
    rng = np.random.default_rng(6)
    lin = Linear(5, 3, rng=rng)
    lin.bias.value[...] = rng.standard_normal(3)
    x = rng.standard_normal((4, 5))
    up = rng.standard_normal((4, 3))
    np.testing.assert_allclose(lin.forward(x), x @ lin.weight.value.T + lin.bias.value)
    dx = lin.backward(up)
    np.testing.assert_allclose(dx, up @ lin.weight.value)
    np.testing.assert_allclose(lin.weight.grad, up.T @ x)
    np.testing.assert_allclose(lin.bias.grad, up.sum(0))
    with pytest.raises(ShapeError):
        lin.forward(np.zeros((4, 4)))
