"""A small staged 3-D CNN classifier with an optional alignment layer.

Layout: stem conv -> stages (conv + 2x max-pool) -> global average pool -> FC.
``stan_position`` p applies the alignment layer to the feature map entering
stage p; p == len(widths) means after the last stage, just before the head.
"""
from __future__ import annotations

import numpy as np

from ..deformnet import Scale
from ..errors import ConfigError, ShapeError, StateError
from ..layer import StanLayer
from ..layers import Conv3d, Linear, MaxPool3d
from ..tensor import check5, reduce_mean_spatial, reduce_mean_spatial_backward
from ..transform import Mode

DEFAULT_WIDTHS = (8, 16, 32)


class ToyBackbone:
    def __init__(self, in_channels: int, num_classes: int, widths=DEFAULT_WIDTHS,
                 stem_width: int = 8, stan_position: int | None = None,
                 stan_scale: Scale | str = Scale.MEDIUM, stan_mode: Mode | str = Mode.AFFINE,
                 seed: int = 0, dtype=np.float32):
        widths = tuple(int(w) for w in widths)
        if stan_position is not None and not 0 <= stan_position <= len(widths):
            raise ConfigError(f"stan_position must be in 0..{len(widths)} or None, got {stan_position}")
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.widths = widths
        self.stem_width = stem_width
        self.stan_position = stan_position
        rng = np.random.default_rng(seed)
        self.stem = Conv3d(in_channels, stem_width, 3, rng=rng, dtype=dtype)
        self.convs, self.pools = [], []
        prev = stem_width
        for w in widths:
            self.convs.append(Conv3d(prev, w, 3, rng=rng, dtype=dtype))
            self.pools.append(MaxPool3d(2))
            prev = w
        self.fc = Linear(prev, num_classes, rng=rng, dtype=dtype)
        self.stan = None
        if stan_position is not None:
            stan_seed = int(rng.integers(2**31))
            self.stan = StanLayer.build(self.channels_at(stan_position), stan_scale, stan_mode,
                                        residual=True, seed=stan_seed, dtype=dtype)
        self._gap_shape = None
        self.last_thetas = None

    def channels_at(self, position: int) -> int:
        return self.stem_width if position == 0 else self.widths[position - 1]

    def named_params(self):
        out = [(f"stem.{n}", p) for n, p in self.stem.params()]
        for i, conv in enumerate(self.convs):
            out += [(f"stage{i}.{n}", p) for n, p in conv.params()]
        out += [(f"fc.{n}", p) for n, p in self.fc.params()]
        if self.stan is not None:
            out += [(f"stan.{n}", p) for n, p in self.stan.named_params()]
        return out

    def params(self):
        return [p for _, p in self.named_params()]

    def param_groups(self, theta_lr_mult: float = 1.0):
        """(params, lr multiplier) groups; the alignment head gets its own rate."""
        head = set()
        if self.stan is not None:
            head = {id(p) for _, p in self.stan.deform.head.params()}
        main = [p for p in self.params() if id(p) not in head]
        groups = [(main, 1.0)]
        if head:
            groups.append(([p for p in self.params() if id(p) in head], theta_lr_mult))
        return groups

    def _maybe_stan(self, h, position):
        if self.stan is not None and self.stan_position == position:
            h, thetas = self.stan.forward(h)
            self.last_thetas = thetas
        return h

    def forward(self, x: np.ndarray) -> np.ndarray:
        check5(x, "clip batch")
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"backbone expects {self.in_channels} channels, got {x.shape[1]}")
        h = self.stem.forward(x)
        for i, (conv, pool) in enumerate(zip(self.convs, self.pools)):
            h = self._maybe_stan(h, i)
            h = pool.forward(conv.forward(h))
        h = self._maybe_stan(h, len(self.convs))
        self._gap_shape = h.shape
        return self.fc.forward(reduce_mean_spatial(h))

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        if self._gap_shape is None:
            raise StateError("backward called before forward")
        dh = reduce_mean_spatial_backward(self.fc.backward(dlogits), self._gap_shape)
        dh = dh.astype(dlogits.dtype, copy=False)
        n = len(self.convs)
        if self.stan is not None and self.stan_position == n:
            dh = self.stan.backward(dh)
        for i in reversed(range(n)):
            dh = self.convs[i].backward(self.pools[i].backward(dh))
            if self.stan is not None and self.stan_position == i:
                dh = self.stan.backward(dh)
        return self.stem.backward(dh)


def count_params(model) -> int:
    return int(sum(p.size for p in model.params()))
