"""The deformation network: conv/max-pool stages, global average pooling and a
linear head regressing the transform parameters from a feature map."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError, StateError
from .layers import Conv3d, Linear, MaxPool3d
from .tensor import Param, check5, reduce_mean_spatial, reduce_mean_spatial_backward


class Scale(str, enum.Enum):
    SMALL = "small"
    MEDIUM = "medium"
    LARGE = "large"


# (kernel edge, channel multiplier as numerator/denominator of C) per layer
_ARCH = {
    Scale.SMALL: ((2, 1, 4),),
    Scale.MEDIUM: ((3, 1, 1), (2, 1, 4)),
    Scale.LARGE: ((4, 4, 1), (3, 1, 1), (2, 1, 4)),
}


@dataclass(frozen=True)
class DeformNetConfig:
    scale: Scale
    dof: int
    channels: int

    def __post_init__(self):
        object.__setattr__(self, "scale", Scale(self.scale))
        if self.dof not in (6, 12):
            raise ConfigError(f"dof must be 6 or 12, got {self.dof}")
        if self.channels < 4:
            raise ConfigError(f"deformation network needs >= 4 input channels, got {self.channels}")

    def layer_specs(self) -> list[tuple[int, int, int]]:
        """(in_ch, out_ch, k) for every conv layer."""
        specs = []
        in_ch = self.channels
        for k, num, den in _ARCH[self.scale]:
            out_ch = max(1, self.channels * num // den)
            specs.append((in_ch, out_ch, k))
            in_ch = out_ch
        return specs


class DeformNet:
    def __init__(self, cfg: DeformNetConfig, convs: list[Conv3d], head: Linear):
        self.cfg = cfg
        self.convs = convs
        self.pools = [MaxPool3d(c.k) for c in convs]
        self.head = head
        self._shape_before_gap = None

    @property
    def dof(self) -> int:
        return self.cfg.dof

    def named_params(self) -> list[tuple[str, Param]]:
        out = []
        for i, conv in enumerate(self.convs):
            out += [(f"conv{i}.{name}", p) for name, p in conv.params()]
        out += [(f"head.{name}", p) for name, p in self.head.params()]
        return out

    def params(self) -> list[Param]:
        return [p for _, p in self.named_params()]

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Return the (N, dof) parameter vectors for a batch of feature maps."""
        check5(x, "deformnet input")
        if x.shape[1] != self.cfg.channels:
            raise ShapeError(f"deformnet expects {self.cfg.channels} channels, got {x.shape[1]}")
        h = x
        for conv, pool in zip(self.convs, self.pools):
            h = pool.forward(conv.forward(h))
        self._shape_before_gap = h.shape
        return self.head.forward(reduce_mean_spatial(h))

    def backward(self, dp: np.ndarray) -> np.ndarray:
        if self._shape_before_gap is None:
            raise StateError("DeformNet.backward called before forward")
        dh = reduce_mean_spatial_backward(self.head.backward(dp), self._shape_before_gap)
        for conv, pool in reversed(list(zip(self.convs, self.pools))):
            dh = conv.backward(pool.backward(dh))
        return dh


def build_deformnet(cfg: DeformNetConfig, rng_seed: int = 0, dtype=np.float64) -> DeformNet:
    """Conv weights get fan-in scaled uniform noise; biases and the whole head
    start at zero so the first forward pass emits P = 0 (identity transform)."""
    rng = np.random.default_rng(rng_seed)
    convs = [Conv3d(i, o, k, rng=rng, dtype=dtype) for i, o, k in cfg.layer_specs()]
    head = Linear(convs[-1].out_ch, cfg.dof, rng=None, dtype=dtype)
    return DeformNet(cfg, convs, head)


def count_params(net) -> int:
    return int(sum(p.size for p in net.params()))
