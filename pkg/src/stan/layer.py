"""The alignment plug-in: out = warp(theta(x), x) + x, theta regressed from x."""
from __future__ import annotations

import numpy as np

from .deformnet import DeformNet, DeformNetConfig, Scale, build_deformnet, count_params
from .errors import ConfigError, StateError
from .tensor import check5
from .transform import Mode, build_theta, build_theta_backward
from .warp import warp_backward, warp_forward


class StanLayer:
    def __init__(self, deform: DeformNet, mode: Mode | str = Mode.AFFINE, residual: bool = True):
        mode = Mode(mode)
        if deform.dof != mode.dof:
            raise ConfigError(f"{mode.value} mode needs dof={mode.dof}, deformnet has {deform.dof}")
        self.deform = deform
        self.mode = mode
        self.residual = residual
        self._cache = None

    @classmethod
    def build(cls, channels: int, scale: Scale | str = Scale.MEDIUM, mode: Mode | str = Mode.AFFINE,
              residual: bool = True, seed: int = 0, dtype=np.float64) -> "StanLayer":
        mode = Mode(mode)
        cfg = DeformNetConfig(Scale(scale), mode.dof, channels)
        return cls(build_deformnet(cfg, seed, dtype), mode, residual)

    def named_params(self):
        return [(f"deform.{name}", p) for name, p in self.deform.named_params()]

    def params(self):
        return self.deform.params()

    def num_params(self) -> int:
        return count_params(self.deform)

    def forward(self, x: np.ndarray):
        """Return (out, thetas) with thetas of shape (N, 4, 4), one per clip."""
        check5(x, "stan input")
        p = self.deform.forward(x)
        thetas = build_theta(self.mode, p)
        warped, wcache = warp_forward(thetas, x)
        out = warped + x if self.residual else warped
        self._cache = wcache
        return out.astype(x.dtype, copy=False), thetas

    def backward_paths(self, dy: np.ndarray) -> dict[str, np.ndarray]:
        """Per-path input gradients: 'residual', 'sample' (through the sampler's
        input) and 'deform' (through theta and the deformation network).

        Parameter gradients are accumulated as a side effect.
        """
        if self._cache is None:
            raise StateError("StanLayer.backward called before forward")
        dx_sample, dtheta = warp_backward(self._cache, dy)
        dp = build_theta_backward(self.mode, dtheta).astype(dy.dtype)
        dx_deform = self.deform.backward(dp)
        paths = {"sample": dx_sample, "deform": dx_deform}
        paths["residual"] = dy if self.residual else np.zeros_like(dy)
        return paths

    def backward(self, dy: np.ndarray) -> np.ndarray:
        paths = self.backward_paths(dy)
        return (paths["residual"] + paths["sample"] + paths["deform"]).astype(dy.dtype, copy=False)


def stan_forward(layer: StanLayer, x: np.ndarray):
    return layer.forward(x)


def stan_backward(layer: StanLayer, upstream: np.ndarray) -> np.ndarray:
    return layer.backward(upstream)
