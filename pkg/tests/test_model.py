import numpy as np
import pytest

from stan.errors import ConfigError, ShapeError, TrainingError
from stan.harness.backbone import ToyBackbone, count_params
from stan.harness.flops import conv3d_flops, count_flops, flops_table, stan_overhead
from stan.harness.optim import SGD, Adam, make_optimizer
from stan.layers import Conv3d
from stan.tensor import Param, finite_diff_grad, rel_error


def test_sgd_momentum_step():
    p = Param(np.array([1.0, 2.0]))
    opt = SGD([([p], 1.0)], lr=0.1, momentum=0.5)
    p.grad[...] = [1.0, -1.0]
    opt.step()
    np.testing.assert_allclose(p.value, [0.9, 2.1])
    opt.step()     # velocity = 0.5 * g + g
    np.testing.assert_allclose(p.value, [0.75, 2.25])


def test_adam_first_step_is_lr_sized():
    p = Param(np.array([0.0, 0.0]))
    opt = Adam([([p], 0.5)], lr=0.1)
    p.grad[...] = [3.0, -0.01]
    opt.step()
    np.testing.assert_allclose(p.value, [-0.05, 0.05], rtol=1e-5)


def test_frozen_params_are_untouched():
    a, b = Param(np.ones(3)), Param(np.ones(3))
    b.frozen = True
    opt = make_optimizer("adam", [([a, b], 1.0)], lr=0.1)
    a.grad[...] = b.grad[...] = 1.0
    opt.step()
    assert np.all(a.value < 1) and np.all(b.value == 1)


def test_optimizer_errors():
    p = Param(np.zeros(1))
    with pytest.raises(ConfigError):
        make_optimizer("rmsprop", [([p], 1.0)], lr=0.1)
    with pytest.raises(ConfigError):
        SGD([([p], 1.0)], lr=0.0)
    p.grad[...] = np.nan
    with pytest.raises(TrainingError):
        SGD([([p], 1.0)], lr=0.1).step()


@pytest.mark.parametrize("pos", [None, 0, 1, 2, 3])
def test_backbone_shapes(pos):
    model = ToyBackbone(1, 5, stan_position=pos, seed=0)
    logits = model.forward(np.random.default_rng(0).standard_normal((2, 1, 4, 8, 8)).astype(np.float32))
    assert logits.shape == (2, 5) and logits.dtype == np.float32
    assert model.backward(np.ones_like(logits)).shape == (2, 1, 4, 8, 8)
    if pos is not None:
        assert model.last_thetas.shape == (2, 4, 4)


def test_backbone_errors():
    with pytest.raises(ConfigError):
        ToyBackbone(1, 3, stan_position=4)
    with pytest.raises(ShapeError):
        ToyBackbone(2, 3).forward(np.zeros((1, 1, 2, 4, 4), dtype=np.float32))


def test_backbone_gradient_with_alignment():
    rng = np.random.default_rng(3)
    model = ToyBackbone(1, 3, widths=(4, 4), stem_width=4, stan_position=1,
                        stan_scale="small", seed=2, dtype=np.float64)
    head = model.stan.deform.head
    head.weight.value[...] = rng.uniform(-0.2, 0.2, head.weight.value.shape)
    x = rng.standard_normal((2, 1, 3, 6, 6))
    up = rng.standard_normal((2, 3))

    def loss(v):
        return float(np.sum(model.forward(v) * up))

    loss(x)
    dx = model.backward(up)
    idx = rng.choice(x.size, 12, replace=False)
    num = finite_diff_grad(loss, x, indices=idx)
    assert rel_error(dx.ravel()[idx], num.ravel()[idx]) < 1e-5
    w = model.stem.weight
    num_w = finite_diff_grad(lambda v: loss(x), w.value, indices=range(10))
    assert rel_error(w.grad.ravel()[:10], num_w.ravel()[:10]) < 1e-5


def test_param_groups_split_alignment_head():
    model = ToyBackbone(1, 3, stan_position=2)
    groups = model.param_groups(0.1)
    assert len(groups) == 2 and groups[1][1] == 0.1
    assert len(groups[1][0]) == 2
    assert sum(len(g) for g, _ in groups) == len(model.params())
    assert len(ToyBackbone(1, 3).param_groups(0.1)) == 1


@pytest.mark.parametrize("pos", [0, 1, 2, 3])
def test_params_delta_equals_layer_count(pos):
    plain = ToyBackbone(1, 4, seed=0)
    with_stan = ToyBackbone(1, 4, stan_position=pos, seed=0)
    assert count_params(with_stan) - count_params(plain) == with_stan.stan.num_params()


def test_unit_conv_flops():
    conv = Conv3d(1, 1, 1)
    assert conv3d_flops(conv, (1, 1, 1, 1, 1)) == 3


def test_doubling_width_doubles_conv_flops():
    model = ToyBackbone(1, 4, stan_position=None)
    a = dict(flops_table(model, (1, 1, 8, 16, 16)))
    b = dict(flops_table(model, (1, 1, 8, 16, 32)))
    for name in a:
        if "conv" in name or name == "stem":
            assert b[name] == 2 * a[name]


def test_flops_table_covers_stan():
    model = ToyBackbone(1, 4, stan_position=2)
    names = [n for n, _ in flops_table(model, (1, 1, 8, 32, 32))]
    assert "stan.trilinear" in names and "stan.deform.head" in names
    assert count_flops(model, (1, 1, 8, 32, 32)) > count_flops(ToyBackbone(1, 4), (1, 1, 8, 32, 32))


def test_default_overhead_under_five_percent():
    stan, total, frac = stan_overhead(ToyBackbone(1, 4, stan_position=2), (1, 1, 8, 32, 32))
    assert 0 < frac < 0.05 and stan < total
