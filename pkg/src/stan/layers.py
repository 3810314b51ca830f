"""Conv / pool / linear layers with hand-written backward passes.

Every layer caches what it needs during ``forward`` and consumes the cache in
``backward``, which returns the input gradient and accumulates parameter
gradients into ``Param.grad``.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, StateError
from .tensor import Param, check5


def same_padding(k: int) -> tuple[int, int]:
    """(low, high) zero padding that keeps an axis length under a k-wide kernel."""
    lo = (k - 1) // 2
    return lo, k - 1 - lo


def _windows(xp: np.ndarray, k: int) -> np.ndarray:
    return sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))


class Conv3d:
    """Stride-1 cubic convolution with same padding, optionally followed by ReLU."""

    def __init__(self, in_ch: int, out_ch: int, k: int, rng: np.random.Generator | None = None,
                 dtype=np.float64, relu: bool = True):
        if k < 1 or in_ch < 1 or out_ch < 1:
            raise ShapeError(f"invalid conv geometry in={in_ch} out={out_ch} k={k}")
        self.in_ch, self.out_ch, self.k, self.relu = in_ch, out_ch, k, relu
        fan_in = in_ch * k ** 3
        bound = np.sqrt(6.0 / fan_in)
        if rng is None:
            w = np.zeros((out_ch, in_ch, k, k, k))
        else:
            w = rng.uniform(-bound, bound, size=(out_ch, in_ch, k, k, k))
        self.weight = Param(w.astype(dtype))
        self.bias = Param(np.zeros(out_ch, dtype=dtype))
        self._cache = None

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x: np.ndarray) -> np.ndarray:
        check5(x, "conv input")
        if x.shape[1] != self.in_ch:
            raise ShapeError(f"conv expects {self.in_ch} channels, got {x.shape[1]}")
        lo, hi = same_padding(self.k)
        xp = np.pad(x, ((0, 0), (0, 0), (lo, hi), (lo, hi), (lo, hi)))
        win = _windows(xp, self.k)
        y = np.tensordot(win, self.weight.value, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
        y = np.moveaxis(y, 4, 1) + self.bias.value[None, :, None, None, None]
        z = np.ascontiguousarray(y, dtype=x.dtype)
        self._cache = (x.shape, xp, z)
        return np.maximum(z, 0.0) if self.relu else z.copy()

    def relu_margin(self) -> float:
        """Smallest |pre-activation| seen in the last forward pass."""
        if self._cache is None:
            raise StateError("no forward pass cached")
        return float(np.abs(self._cache[2]).min()) if self.relu else np.inf

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StateError("Conv3d.backward called before forward")
        shape, xp, z = self._cache
        if self.relu:
            dy = np.where(z > 0, dy, 0.0).astype(dy.dtype)
        k = self.k
        self.bias.accumulate(dy.sum(axis=(0, 2, 3, 4)))
        win = _windows(xp, k)
        self.weight.accumulate(np.tensordot(dy, win, axes=([0, 2, 3, 4], [0, 2, 3, 4])))
        # input gradient: full correlation of dy with the flipped kernel, then
        # crop the same-padding border back off
        dyp = np.pad(dy, ((0, 0), (0, 0)) + ((k - 1, k - 1),) * 3)
        wflip = self.weight.value[:, :, ::-1, ::-1, ::-1]
        dxp = np.tensordot(_windows(dyp, k), wflip, axes=([1, 5, 6, 7], [0, 2, 3, 4]))
        dxp = np.moveaxis(dxp, 4, 1)
        lo, _ = same_padding(k)
        _, _, T, H, W = shape
        return np.ascontiguousarray(dxp[:, :, lo:lo + T, lo:lo + H, lo:lo + W], dtype=dy.dtype)


class MaxPool3d:
    """Non-overlapping k^3 max pooling, stride k, ceil mode.

    Trailing partial windows are pooled over their real elements. Ties route
    the gradient to the first element in (t, h, w) scan order.
    """

    def __init__(self, k: int):
        if k < 1:
            raise ShapeError(f"pool size must be >= 1, got {k}")
        self.k = k
        self._cache = None
        self._blocks = None

    def params(self):
        return []

    @staticmethod
    def output_shape(shape, k: int):
        n, c, t, h, w = shape
        return n, c, -(-t // k), -(-h // k), -(-w // k)

    def forward(self, x: np.ndarray) -> np.ndarray:
        check5(x, "pool input")
        k = self.k
        if k == 1:
            self._cache = (x.shape, None)
            return x.copy()
        N, C, T, H, W = x.shape
        _, _, To, Ho, Wo = self.output_shape(x.shape, k)
        xp = np.full((N, C, To * k, Ho * k, Wo * k), -np.inf, dtype=x.dtype)
        xp[:, :, :T, :H, :W] = x
        blocks = xp.reshape(N, C, To, k, Ho, k, Wo, k).transpose(0, 1, 2, 4, 6, 3, 5, 7)
        blocks = blocks.reshape(N, C, To, Ho, Wo, k ** 3)
        arg = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        self._cache = (x.shape, arg)
        self._blocks = blocks
        return np.ascontiguousarray(out)

    def tie_margin(self) -> float:
        """Smallest gap between a window's max and its runner-up in the last
        forward pass (inf when every window has a single element)."""
        if self._cache is None:
            raise StateError("no forward pass cached")
        if self.k == 1:
            return np.inf
        top2 = -np.sort(-self._blocks, axis=-1)[..., :2]
        gap = top2[..., 0] - top2[..., 1]
        gap = gap[np.isfinite(gap)]
        return float(gap.min()) if gap.size else np.inf

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StateError("MaxPool3d.backward called before forward")
        shape, arg = self._cache
        k = self.k
        if k == 1:
            return dy.copy()
        N, C, T, H, W = shape
        _, _, To, Ho, Wo = dy.shape
        blocks = np.zeros((N, C, To, Ho, Wo, k ** 3), dtype=dy.dtype)
        np.put_along_axis(blocks, arg[..., None], dy[..., None], axis=-1)
        full = blocks.reshape(N, C, To, Ho, Wo, k, k, k).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        full = full.reshape(N, C, To * k, Ho * k, Wo * k)
        return np.ascontiguousarray(full[:, :, :T, :H, :W])


class Linear:
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None, dtype=np.float64, scale: float | None = None):
        self.in_features, self.out_features = in_features, out_features
        if rng is None:
            w = np.zeros((out_features, in_features))
        else:
            bound = np.sqrt(1.0 / in_features) if scale is None else scale
            w = rng.uniform(-bound, bound, size=(out_features, in_features))
        self.weight = Param(w.astype(dtype))
        self.bias = Param(np.zeros(out_features, dtype=dtype))
        self._x = None

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"linear expects (N, {self.in_features}), got {x.shape}")
        self._x = x
        return (x @ self.weight.value.T + self.bias.value).astype(x.dtype, copy=False)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise StateError("Linear.backward called before forward")
        self.weight.accumulate(dy.T @ self._x)
        self.bias.accumulate(dy.sum(axis=0))
        return dy @ self.weight.value
