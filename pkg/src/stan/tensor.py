"""Dense (N, C, T, H, W) tensors, a few differentiable primitives, and the
finite-difference oracle used by every gradient check.

Tensors are plain C-contiguous numpy arrays; this module only pins down the
shape contract and the snapshot file format.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .errors import NumericError, ShapeError

MAX_ELEMENTS = 2**31 - 1
_U32_MAX = 2**32 - 1
FLOAT_DTYPES = (np.float32, np.float64)


def check_shape(shape: Iterable[int]) -> tuple[int, int, int, int, int]:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 5:
        raise ShapeError(f"expected a 5-tuple (N, C, T, H, W), got {shape}")
    if any(s < 1 for s in shape):
        raise ShapeError(f"shape components must be >= 1, got {shape}")
    if any(s > _U32_MAX for s in shape) or int(np.prod(shape, dtype=object)) > MAX_ELEMENTS:
        raise ShapeError(f"shape {shape} overflows the addressable element count")
    return shape


def check5(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not isinstance(x, np.ndarray) or x.ndim != 5:
        raise ShapeError(f"{name} must be a 5-D array (N, C, T, H, W)")
    check_shape(x.shape)
    if x.dtype.type not in FLOAT_DTYPES:
        raise ShapeError(f"{name} must be float32 or float64, got {x.dtype}")
    return x


def alloc(shape, fill: float = 0.0, dtype=np.float64) -> np.ndarray:
    return np.full(check_shape(shape), fill, dtype=dtype)


def flat_index(shape, idx) -> int:
    """Row-major flat offset of element (n, c, t, h, w)."""
    n, c, t, h, w = idx
    _, C, T, H, W = shape
    return (((n * C + c) * T + t) * H + h) * W + w


def unflat_index(shape, flat: int) -> tuple[int, int, int, int, int]:
    _, C, T, H, W = shape
    flat, w = divmod(flat, W)
    flat, h = divmod(flat, H)
    flat, t = divmod(flat, T)
    n, c = divmod(flat, C)
    return n, c, t, h, w


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return a + b


def add_backward(upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return upstream, upstream


def reduce_mean_spatial(a: np.ndarray) -> np.ndarray:
    """Mean over (T, H, W); returns an (N, C) matrix."""
    check5(a)
    n, c = a.shape[:2]
    return a.reshape(n, c, -1).mean(axis=2)


def reduce_mean_spatial_backward(upstream: np.ndarray, shape) -> np.ndarray:
    count = shape[2] * shape[3] * shape[4]
    g = (upstream / count)[:, :, None, None, None]
    return np.broadcast_to(g, shape).copy()


class Param:
    """A trainable buffer and its additive gradient accumulator."""

    __slots__ = ("value", "grad", "frozen")

    def __init__(self, value: np.ndarray):
        self.value = value
        self.grad = np.zeros_like(value)
        self.frozen = False

    def zero_grad(self):
        self.grad[...] = 0.0

    def accumulate(self, g: np.ndarray):
        if g.shape != self.value.shape:
            raise ShapeError(f"gradient shape {g.shape} != value shape {self.value.shape}")
        self.grad += g

    @property
    def size(self) -> int:
        return self.value.size

    def __repr__(self):
        return f"Param(shape={self.value.shape}, dtype={self.value.dtype})"


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-6,
                     indices=None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``indices`` restricts evaluation to a subset of flat positions; the other
    entries of the result are left at zero. ``x`` is perturbed in place and
    restored, so ``f`` must not hold on to it.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if x.dtype != np.float64:
        raise NumericError("finite differences need float64 inputs")
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    for i in indices:
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x))
        flat[i] = orig - eps
        lo = float(f(x))
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError(f"non-finite function value at flat index {i}")
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Norm-wise relative error ||a - n|| / max(||a||, ||n||, floor)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


# -- snapshot files -----------------------------------------------------------
# 5 x u32 little-endian shape header followed by little-endian float32 data.

def save_snapshot(path, x: np.ndarray) -> None:
    check5(x)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<5I", *x.shape))
        fh.write(np.ascontiguousarray(x, dtype="<f4").tobytes())


def load_snapshot(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 20:
        raise ShapeError(f"{path}: truncated snapshot header")
    shape = check_shape(struct.unpack("<5I", raw[:20]))
    body = raw[20:]
    expected = int(np.prod(shape)) * 4
    if len(body) != expected:
        raise ShapeError(f"{path}: expected {expected} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(shape).astype(np.float32)
