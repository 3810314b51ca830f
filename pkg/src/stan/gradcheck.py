"""Central-difference verification of every hand-written backward pass.

Each check draws random float64 cases, rejects the ones that sit too close
to a non-differentiable point (integer sampling coordinates, ReLU zero
crossings, max-pool ties), and compares the analytic gradient against
``finite_diff_grad`` on a random subset of coordinates plus one random
direction. The score per op is the worst relative error over all cases.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import deformnet, layers, tensor, transform, warp
from .errors import NumericError
from .layer import StanLayer

TOLERANCE = 1e-5
EPS = 1e-6
KINK_MARGIN_VOXELS = 1e-3
ACT_MARGIN = 1e-4
MAX_COORDS = 24
MAX_ATTEMPTS = 200


@dataclass
class CheckResult:
    op: str
    cases: int
    worst: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.worst) and self.worst < TOLERANCE)


class _Reject(Exception):
    pass


def _compare(f: Callable[[], float], x: np.ndarray, analytic: np.ndarray,
             rng: np.random.Generator) -> float:
    """Relative error between ``analytic`` and the numeric gradient of ``f``
    w.r.t. the buffer ``x`` (perturbed in place)."""
    if x.size <= MAX_COORDS:
        idx = np.arange(x.size)
    else:
        idx = np.sort(rng.choice(x.size, MAX_COORDS, replace=False))
    num = tensor.finite_diff_grad(lambda _: f(), x, EPS, indices=idx)
    err = tensor.rel_error(analytic.reshape(-1)[idx], num.reshape(-1)[idx])

    v = rng.standard_normal(x.shape)
    saved = x.copy()
    x += EPS * v
    hi = f()
    x[...] = saved - EPS * v
    lo = f()
    x[...] = saved
    if not (np.isfinite(hi) and np.isfinite(lo)):
        raise NumericError("non-finite value in directional check")
    d_num = (hi - lo) / (2 * EPS)
    d_an = float(np.sum(analytic * v))
    scale = max(float(np.linalg.norm(analytic) * np.linalg.norm(v)), 1e-8)
    return max(err, abs(d_num - d_an) / scale)


def _random_dims(rng, max_shape=(2, 3, 4, 6, 6), min_shape=(1, 1, 1, 1, 1)):
    return tuple(int(rng.integers(lo, hi + 1)) for lo, hi in zip(min_shape, max_shape))


def _sampler_margin(src: np.ndarray, dims) -> float:
    """Distance (in voxels) from the nearest integer over every non-degenerate
    axis of a sampling grid."""
    T, H, W = dims
    worst = np.inf
    for k, L in enumerate((T, W, H)):
        if L == 1:
            continue
        u = (src[..., k] + 1.0) * (L - 1) / 2.0
        worst = min(worst, float(np.abs(u - np.rint(u)).min()))
    return worst


def _random_grid(rng, T, H, W) -> np.ndarray:
    """Grid whose voxel coordinates avoid integers by >= the kink margin and
    reach partly outside the volume to exercise zero padding."""
    grid = np.empty((T, H, W, 3))
    for k, L in enumerate((T, W, H)):
        if L == 1:
            grid[..., k] = rng.uniform(-1, 1, size=(T, H, W))
            continue
        u = rng.uniform(-0.9, L - 0.1, size=(T, H, W))
        frac = u - np.floor(u)
        near = np.minimum(frac, 1 - frac) < KINK_MARGIN_VOXELS
        u[near] += 2 * KINK_MARGIN_VOXELS
        grid[..., k] = 2.0 * u / (L - 1) - 1.0
    return grid


# -- individual checks ----------------------------------------------------------

def check_trilinear(rng) -> float:
    N, C, T, H, W = _random_dims(rng)
    x = rng.standard_normal((N, C, T, H, W))
    grid = _random_grid(rng, T, H, W) if rng.random() < 0.5 else \
        np.stack([_random_grid(rng, T, H, W) for _ in range(N)])
    R = rng.standard_normal(x.shape)
    dx, dgrid = warp.trilinear_backward(x, grid, R)

    def f():
        return float(np.sum(R * warp.trilinear_sample(x, grid)))
    return max(_compare(f, x, dx, rng), _compare(f, grid, dgrid, rng))


def check_map_grid_theta(rng) -> float:
    N, C, T, H, W = _random_dims(rng, min_shape=(1, 1, 2, 2, 2))
    x = rng.standard_normal((N, C, T, H, W))
    theta = np.eye(4)
    theta[:3] += rng.uniform(-0.25, 0.25, size=(3, 4))
    if rng.random() < 0.5:
        theta = np.stack([theta] + [np.eye(4) + np.pad(rng.uniform(-0.25, 0.25, (3, 4)), ((0, 1), (0, 0)))
                                    for _ in range(N - 1)])
    src = warp.map_grid(theta, warp.make_output_grid(T, H, W))
    if _sampler_margin(src, (T, H, W)) < KINK_MARGIN_VOXELS:
        raise _Reject
    R = rng.standard_normal(x.shape)
    out, cache = warp.warp_forward(theta, x)
    dx, dtheta = warp.warp_backward(cache, R)

    def f():
        return float(np.sum(R * warp.warp(theta, x)))
    return max(_compare(f, theta, dtheta, rng), _compare(f, x, dx, rng))


def check_conv3d(rng) -> float:
    N, C, T, H, W = _random_dims(rng)
    out_ch = int(rng.integers(1, 4))
    k = int(rng.integers(1, 4))
    conv = layers.Conv3d(C, out_ch, k, rng=rng)
    conv.bias.value[...] = rng.uniform(-0.2, 0.2, out_ch)
    x = rng.uniform(0.1, 1.0, (N, C, T, H, W))
    conv.forward(x)
    if conv.relu_margin() < ACT_MARGIN:
        raise _Reject
    R = rng.standard_normal(conv.forward(x).shape)
    dx = conv.backward(R)

    def f():
        return float(np.sum(R * conv.forward(x)))
    return max(_compare(f, x, dx, rng),
               _compare(f, conv.weight.value, conv.weight.grad, rng),
               _compare(f, conv.bias.value, conv.bias.grad, rng))


def check_maxpool3d(rng) -> float:
    x = rng.standard_normal(_random_dims(rng))
    pool = layers.MaxPool3d(int(rng.integers(1, 4)))
    y = pool.forward(x)
    if pool.tie_margin() < ACT_MARGIN:
        raise _Reject
    R = rng.standard_normal(y.shape)
    dx = pool.backward(R)
    return _compare(lambda: float(np.sum(R * pool.forward(x))), x, dx, rng)


def check_linear(rng) -> float:
    n, fin, fout = (int(v) for v in rng.integers(1, 7, size=3))
    lin = layers.Linear(fin, fout, rng=rng)
    lin.bias.value[...] = rng.standard_normal(fout)
    x = rng.standard_normal((n, fin))
    R = rng.standard_normal((n, fout))
    lin.forward(x)
    dx = lin.backward(R)

    def f():
        return float(np.sum(R * lin.forward(x)))
    return max(_compare(f, x, dx, rng),
               _compare(f, lin.weight.value, lin.weight.grad, rng),
               _compare(f, lin.bias.value, lin.bias.grad, rng))


def check_tensor_ops(rng) -> float:
    a = rng.standard_normal(_random_dims(rng))
    b = rng.standard_normal(a.shape)
    R = rng.standard_normal(a.shape)
    da, db = tensor.add_backward(R)
    Rm = rng.standard_normal(a.shape[:2])
    dm = tensor.reduce_mean_spatial_backward(Rm, a.shape)

    def f_add():
        return float(np.sum(R * tensor.add(a, b)))

    def f_mean():
        return float(np.sum(Rm * tensor.reduce_mean_spatial(a)))
    return max(_compare(f_add, a, da, rng), _compare(f_add, b, db, rng),
               _compare(f_mean, a, dm, rng))


def check_build_theta(rng) -> float:
    mode = transform.Mode.AFFINE if rng.random() < 0.5 else transform.Mode.ATTENTION
    p = rng.standard_normal((int(rng.integers(1, 4)), mode.dof))
    R = rng.standard_normal(p.shape[:1] + (4, 4))
    dp = transform.build_theta_backward(mode, R)
    return _compare(lambda: float(np.sum(R * transform.build_theta(mode, p))), p, dp, rng)


def _random_deformnet(rng, channels, dof, head_scale):
    scale = list(deformnet.Scale)[int(rng.integers(3))]
    cfg = deformnet.DeformNetConfig(scale, dof, channels)
    net = deformnet.build_deformnet(cfg, int(rng.integers(2**31)))
    for conv in net.convs:
        conv.bias.value[...] = rng.uniform(0.0, 0.2, conv.out_ch)
    net.head.weight.value[...] = rng.uniform(-head_scale, head_scale, net.head.weight.value.shape)
    net.head.bias.value[...] = rng.uniform(-head_scale, head_scale, dof)
    return net


def _net_margins_ok(net) -> bool:
    return (min(c.relu_margin() for c in net.convs) >= ACT_MARGIN
            and min(p.tie_margin() for p in net.pools) >= ACT_MARGIN)


def check_deformnet(rng) -> float:
    N, _, T, H, W = _random_dims(rng)
    C = int(rng.integers(4, 7))
    net = _random_deformnet(rng, C, int(rng.choice([6, 12])), head_scale=1.0)
    x = rng.uniform(0.1, 1.0, (N, C, T, H, W))
    net.forward(x)
    if not _net_margins_ok(net):
        raise _Reject
    R = rng.standard_normal((N, net.dof))
    for p in net.params():
        p.zero_grad()
    net.forward(x)
    dx = net.backward(R)

    def f():
        return float(np.sum(R * net.forward(x)))
    errs = [_compare(f, x, dx, rng)]
    errs += [_compare(f, p.value, p.grad.copy(), rng) for p in net.params()]
    return max(errs)


def check_stan(rng) -> float:
    N, _, T, H, W = _random_dims(rng, max_shape=(2, 4, 4, 6, 6), min_shape=(1, 4, 2, 2, 2))
    C = 4
    mode = transform.Mode.AFFINE if rng.random() < 0.5 else transform.Mode.ATTENTION
    net = _random_deformnet(rng, C, mode.dof, head_scale=0.3)
    layer = StanLayer(net, mode, residual=bool(rng.random() < 0.8))
    x = rng.uniform(0.1, 1.0, (N, C, T, H, W))
    layer.forward(x)
    if not _net_margins_ok(net):
        raise _Reject
    if _sampler_margin(layer._cache.src_grid, (T, H, W)) < KINK_MARGIN_VOXELS:
        raise _Reject
    for p in layer.params():
        p.zero_grad()
    out, _ = layer.forward(x)
    R = rng.standard_normal(out.shape)
    dx = layer.backward(R)

    def f():
        return float(np.sum(R * layer.forward(x)[0]))
    errs = [_compare(f, x, dx, rng)]
    errs += [_compare(f, p.value, p.grad.copy(), rng) for p in layer.params()]
    return max(errs)


CHECKS: dict[str, Callable] = {
    "tensor_ops": check_tensor_ops,
    "build_theta": check_build_theta,
    "trilinear": check_trilinear,
    "map_grid_theta": check_map_grid_theta,
    "conv3d": check_conv3d,
    "maxpool3d": check_maxpool3d,
    "linear": check_linear,
    "deformnet": check_deformnet,
    "stan": check_stan,
}


def run_check(name: str, cases: int = 50, seed: int = 0) -> CheckResult:
    check = CHECKS[name]
    rng = np.random.default_rng([seed, sorted(CHECKS).index(name)])
    worst, done, attempts = 0.0, 0, 0
    while done < cases:
        attempts += 1
        if attempts > MAX_ATTEMPTS + cases:
            raise NumericError(f"{name}: could not draw {cases} kink-free cases")
        try:
            err = check(rng)
        except _Reject:
            continue
        if not np.isfinite(err):
            raise NumericError(f"{name}: non-finite gradient error")
        worst = max(worst, err)
        done += 1
    return CheckResult(name, done, worst)


def run_suite(cases: int = 50, seed: int = 0, ops=None) -> list[CheckResult]:
    return [run_check(name, cases, seed) for name in (ops or CHECKS)]
