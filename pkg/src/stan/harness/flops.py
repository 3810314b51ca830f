"""Analytic FLOP accounting.

Convention: one multiply-add is 2 FLOPs; comparisons (ReLU, max pooling) are
free. Per-op costs:

    conv3d        2*Cin*Cout*k^3*T*H*W  + Cout*T*H*W (bias)
    linear        2*in*out + out
    global mean   C*T*H*W adds + C divides
    theta build   3 adds (the 1+p diagonal)
    grid map      18 per output voxel (3x3 block times (t,x,y) plus offset)
    trilinear     31 per output voxel per channel (24 multiplies, 7 adds)
    residual add  C*T*H*W
"""
from __future__ import annotations

from ..deformnet import DeformNet
from ..layer import StanLayer
from ..layers import Conv3d, Linear, MaxPool3d
from .backbone import ToyBackbone

GRID_MAP_PER_VOXEL = 18
TRILINEAR_PER_SAMPLE = 31
THETA_BUILD = 3


def conv3d_flops(conv: Conv3d, shape) -> int:
    n, _, t, h, w = shape
    vox = n * t * h * w
    return 2 * conv.in_ch * conv.out_ch * conv.k ** 3 * vox + conv.out_ch * vox


def linear_flops(lin: Linear, batch: int) -> int:
    return batch * (2 * lin.in_features * lin.out_features + lin.out_features)


def gap_flops(shape) -> int:
    n, c, t, h, w = shape
    return n * c * (t * h * w + 1)


def _deformnet_table(net: DeformNet, shape, prefix: str):
    rows = []
    for i, (conv, pool) in enumerate(zip(net.convs, net.pools)):
        rows.append((f"{prefix}conv{i}", conv3d_flops(conv, shape)))
        shape = (shape[0], conv.out_ch) + shape[2:]
        shape = MaxPool3d.output_shape(shape, pool.k)
    rows.append((f"{prefix}gap", gap_flops(shape)))
    rows.append((f"{prefix}head", linear_flops(net.head, shape[0])))
    return rows


def _stan_table(layer: StanLayer, shape, prefix: str = "stan."):
    n, c, t, h, w = shape
    vox = t * h * w
    rows = _deformnet_table(layer.deform, shape, prefix + "deform.")
    rows += [
        (prefix + "theta", n * THETA_BUILD),
        (prefix + "grid_map", n * vox * GRID_MAP_PER_VOXEL),
        (prefix + "trilinear", n * c * vox * TRILINEAR_PER_SAMPLE),
    ]
    if layer.residual:
        rows.append((prefix + "residual", n * c * vox))
    return rows


def flops_table(model, input_shape) -> list[tuple[str, int]]:
    """Per-op (name, flops) rows for ``model`` on an input of ``input_shape``."""
    shape = tuple(int(s) for s in input_shape)
    if isinstance(model, Conv3d):
        return [("conv", conv3d_flops(model, shape))]
    if isinstance(model, DeformNet):
        return _deformnet_table(model, shape, "")
    if isinstance(model, StanLayer):
        return _stan_table(model, shape, "")
    if not isinstance(model, ToyBackbone):
        raise TypeError(f"no FLOP model for {type(model).__name__}")

    rows = [("stem", conv3d_flops(model.stem, shape))]
    shape = (shape[0], model.stem.out_ch) + shape[2:]
    for i, (conv, pool) in enumerate(zip(model.convs, model.pools)):
        if model.stan is not None and model.stan_position == i:
            rows += _stan_table(model.stan, shape)
        rows.append((f"stage{i}.conv", conv3d_flops(conv, shape)))
        shape = MaxPool3d.output_shape((shape[0], conv.out_ch) + shape[2:], pool.k)
    if model.stan is not None and model.stan_position == len(model.convs):
        rows += _stan_table(model.stan, shape)
    rows.append(("gap", gap_flops(shape)))
    rows.append(("fc", linear_flops(model.fc, shape[0])))
    return rows


def count_flops(model, input_shape) -> int:
    return int(sum(v for _, v in flops_table(model, input_shape)))


def stan_overhead(model: ToyBackbone, input_shape) -> tuple[int, int, float]:
    """(alignment-layer FLOPs, total FLOPs, fraction of total)."""
    rows = flops_table(model, input_shape)
    total = sum(v for _, v in rows)
    stan = sum(v for name, v in rows if name.startswith("stan."))
    return stan, total, stan / total
