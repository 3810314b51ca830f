"""Differentiable trilinear warping of (N, C, T, H, W) feature maps.

Coordinates are normalized to [-1, 1] per axis with the align-corners
convention: -1 and +1 sit on the centers of the first and last voxel. A grid
stores (t, x, y) triples; x runs along W and y along H. A transform maps
output-grid coordinates to the source coordinates that get sampled, and
samples falling outside the input read as zero.

An axis of length 1 is degenerate: every coordinate along it lands on the
single voxel and carries no gradient.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError
from .tensor import check5

SNAP_TOL = 1e-9  # voxels


def _axis_coords(length: int, dtype) -> np.ndarray:
    if length == 1:
        return np.zeros(1, dtype=dtype)
    return (-1.0 + 2.0 * np.arange(length) / (length - 1)).astype(dtype)


def make_output_grid(T: int, H: int, W: int, dtype=np.float64) -> np.ndarray:
    """Regular (T, H, W, 3) grid of normalized (t, x, y) coordinates."""
    if min(T, H, W) < 1:
        raise ShapeError(f"grid dimensions must be >= 1, got {(T, H, W)}")
    t = _axis_coords(T, dtype)[:, None, None]
    y = _axis_coords(H, dtype)[None, :, None]
    x = _axis_coords(W, dtype)[None, None, :]
    grid = np.empty((T, H, W, 3), dtype=dtype)
    grid[..., 0] = t
    grid[..., 1] = x
    grid[..., 2] = y
    return grid


def map_grid(theta: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Apply the top 3x4 block of ``theta`` to every (t, x, y, 1) in ``grid``.

    ``theta`` may be (4, 4) or batched (N, 4, 4); the result gains the batch
    axis in the latter case.
    """
    theta = np.asarray(theta)
    A = theta[..., :3, :3].astype(grid.dtype)
    b = theta[..., :3, 3].astype(grid.dtype)
    if theta.ndim == 2:
        return grid @ A.T + b
    return np.einsum("thwj,nij->nthwi", grid, A) + b[:, None, None, None, :]


def map_grid_backward(grid: np.ndarray, dsrc: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. theta given the gradient w.r.t. the mapped grid."""
    homog = np.concatenate([grid, np.ones(grid.shape[:-1] + (1,), dtype=grid.dtype)], axis=-1)
    g2 = homog.reshape(-1, 4)
    if dsrc.ndim == 4:
        dtheta = np.zeros((4, 4), dtype=np.float64)
        dtheta[:3] = dsrc.reshape(-1, 3).T @ g2
        return dtheta
    n = dsrc.shape[0]
    dtheta = np.zeros((n, 4, 4), dtype=np.float64)
    dtheta[:, :3] = np.einsum("npi,pj->nij", dsrc.reshape(n, -1, 3), g2)
    return dtheta


@dataclass
class _Corners:
    """Flat source index, validity-folded weight and weight derivative for the
    8 neighbors of every sample point (shape (8, P) / (8, P, 3))."""
    index: np.ndarray
    weight: np.ndarray
    dweight: np.ndarray


def _corners(src: np.ndarray, dims: tuple[int, int, int]) -> _Corners:
    T, H, W = dims
    if not np.all(np.isfinite(src)):
        raise NumericError("sampling grid has non-finite coordinates")
    pts = src.reshape(-1, 3).astype(np.float64)
    lengths = (T, W, H)  # per grid component
    scales = np.array([(L - 1) / 2.0 for L in lengths])
    u = (pts + 1.0) * scales
    # the normalize/denormalize round trip is off by a few ulp; snapping makes
    # voxel-center samples (and so the identity warp) exact
    nearest = np.rint(u)
    u = np.where(np.abs(u - nearest) < SNAP_TOL, nearest, u)
    # beyond [-1, L] every neighbor is out of range, so clipping changes nothing
    for k, L in enumerate(lengths):
        np.clip(u[:, k], -2.0, L + 1.0, out=u[:, k])
    base = np.floor(u).astype(np.int64)
    frac = u - base

    P = pts.shape[0]
    index = np.empty((8, P), dtype=np.int64)
    weight = np.empty((8, P), dtype=np.float64)
    dweight = np.empty((8, P, 3), dtype=np.float64)
    for corner in range(8):
        bits = ((corner >> 2) & 1, (corner >> 1) & 1, corner & 1)
        idx = [base[:, k] + bits[k] for k in range(3)]
        per_axis = [frac[:, k] if bits[k] else 1.0 - frac[:, k] for k in range(3)]
        sign = [1.0 if bits[k] else -1.0 for k in range(3)]
        valid = np.ones(P, dtype=bool)
        for k, L in enumerate(lengths):
            valid &= (idx[k] >= 0) & (idx[k] < L)
        it, ix, iy = (np.where(valid, i, 0) for i in idx)
        index[corner] = (it * H + iy) * W + ix
        w = per_axis[0] * per_axis[1] * per_axis[2]
        weight[corner] = np.where(valid, w, 0.0)
        dw = np.stack([
            sign[0] * per_axis[1] * per_axis[2],
            sign[1] * per_axis[0] * per_axis[2],
            sign[2] * per_axis[0] * per_axis[1],
        ], axis=-1) * scales
        dweight[corner] = np.where(valid[:, None], dw, 0.0)
    return _Corners(index, weight, dweight)


def _grid_per_item(x: np.ndarray, grid: np.ndarray) -> np.ndarray:
    N = x.shape[0]
    if grid.ndim == 4 and grid.shape[-1] == 3:
        return np.broadcast_to(grid, (N,) + grid.shape)
    if grid.ndim == 5 and grid.shape[0] == N and grid.shape[-1] == 3:
        return grid
    raise ShapeError(f"grid shape {grid.shape} does not fit a batch of {N}")


def _sample_item(x_flat: np.ndarray, c: _Corners) -> np.ndarray:
    out = np.zeros((x_flat.shape[0], c.index.shape[1]), dtype=np.float64)
    for k in range(8):
        out += x_flat[:, c.index[k]] * c.weight[k]
    return out


def _backward_item(x_flat: np.ndarray, c: _Corners, up: np.ndarray):
    C, P_in = x_flat.shape
    P = c.index.shape[1]
    offsets = (np.arange(C, dtype=np.int64) * P_in)[:, None]
    flat_idx = (offsets[None] + c.index[:, None, :]).ravel()
    contrib = (up[None, :, :] * c.weight[:, None, :]).ravel()
    dx = np.bincount(flat_idx, weights=contrib, minlength=C * P_in).reshape(C, P_in)
    dgrid = np.zeros((P, 3), dtype=np.float64)
    for k in range(8):
        s = np.einsum("cp,cp->p", up, x_flat[:, c.index[k]])
        dgrid += s[:, None] * c.dweight[k]
    return dx, dgrid


def trilinear_sample(x: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Sample ``x`` at the normalized coordinates in ``grid``.

    ``grid`` is (To, Ho, Wo, 3), shared across the batch, or
    (N, To, Ho, Wo, 3); the result is (N, C, To, Ho, Wo).
    """
    return _trilinear_forward(x, grid)[0]


def _trilinear_forward(x, grid):
    check5(x, "input")
    grids = _grid_per_item(x, grid)
    N, C, T, H, W = x.shape
    out_dims = grids.shape[1:4]
    out = np.empty((N, C) + out_dims, dtype=x.dtype)
    corners = []
    for n in range(N):
        c = _corners(grids[n], (T, H, W))
        corners.append(c)
        out[n] = _sample_item(x[n].reshape(C, -1), c).reshape((C,) + out_dims)
    return out, corners


def _trilinear_backward_cached(x, corners, grid_shape, upstream):
    N, C, T, H, W = x.shape
    out_dims = tuple(grid_shape[-4:-1])
    if upstream.shape != (N, C) + out_dims:
        raise ShapeError(f"upstream shape {upstream.shape} != {(N, C) + out_dims}")
    dx = np.empty_like(x)
    dgrid = np.empty((N,) + out_dims + (3,), dtype=np.float64)
    for n in range(N):
        dxn, dgn = _backward_item(x[n].reshape(C, -1), corners[n],
                                  upstream[n].reshape(C, -1).astype(np.float64))
        dx[n] = dxn.reshape(C, T, H, W)
        dgrid[n] = dgn.reshape(out_dims + (3,))
    if len(grid_shape) == 4:
        dgrid = dgrid.sum(axis=0)
    return dx, dgrid.astype(x.dtype)


def trilinear_backward(x: np.ndarray, grid: np.ndarray, upstream: np.ndarray):
    """Return (d_input, d_grid) for ``trilinear_sample(x, grid)``.

    d_grid has the same shape as ``grid``; for a shared grid it sums the batch.
    """
    _, corners = _trilinear_forward(x, grid)
    return _trilinear_backward_cached(x, corners, grid.shape, upstream)


@dataclass
class WarpCache:
    x: np.ndarray
    base_grid: np.ndarray
    theta: np.ndarray
    src_grid: np.ndarray
    corners: list


def warp_forward(theta: np.ndarray, x: np.ndarray):
    """Warp ``x`` by ``theta`` ((4, 4) or per-item (N, 4, 4)); returns (out, cache)."""
    check5(x, "input")
    _, _, T, H, W = x.shape
    base = make_output_grid(T, H, W, dtype=np.float64)
    src = map_grid(theta, base)
    out, corners = _trilinear_forward(x, src)
    return out, WarpCache(x, base, np.asarray(theta), src, corners)


def warp_backward(cache: WarpCache, upstream: np.ndarray):
    """Return (d_input, d_theta) for a cached ``warp_forward`` call."""
    dx, dsrc = _trilinear_backward_cached(cache.x, cache.corners, cache.src_grid.shape, upstream)
    dtheta = map_grid_backward(cache.base_grid, dsrc.astype(np.float64))
    return dx, dtheta


def warp(theta: np.ndarray, x: np.ndarray) -> np.ndarray:
    return warp_forward(theta, x)[0]
