"""4x4 spatio-temporal transforms and their construction from network outputs.

A transform acts on homogeneous (t, x, y, 1) column vectors. Builders accept a
single parameter vector of shape (dof,) or a batch of shape (N, dof) and
return (4, 4) or (N, 4, 4) respectively.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ModeError, NumericError, ParseError, SingularityError

_LAST_ROW = np.array([0.0, 0.0, 0.0, 1.0])
SINGULAR_DET = 1e-9


class Mode(str, enum.Enum):
    AFFINE = "affine"
    ATTENTION = "attention"

    @property
    def dof(self) -> int:
        return 12 if self is Mode.AFFINE else 6


# (row, col) of the matrix entry driven by each attention parameter
_ATT_ENTRIES = ((0, 0), (1, 1), (2, 2), (0, 3), (1, 3), (2, 3))
# flat position inside the 12-vector that the same entry occupies
_ATT_TO_AFFINE = np.array([r * 4 + c for r, c in _ATT_ENTRIES])


@dataclass(frozen=True)
class ParamVec:
    mode: Mode
    p: np.ndarray

    def __post_init__(self):
        mode = Mode(self.mode)
        object.__setattr__(self, "mode", mode)
        p = np.asarray(self.p, dtype=np.float64)
        if p.shape[-1:] != (mode.dof,):
            raise ModeError(f"{mode.value} expects {mode.dof} parameters, got shape {p.shape}")
        if not np.all(np.isfinite(p)):
            raise NumericError("parameter vector has non-finite entries")
        object.__setattr__(self, "p", p)

    def theta(self) -> np.ndarray:
        return build_theta(self.mode, self.p)


def _as_params(p, mode: Mode) -> np.ndarray:
    if isinstance(p, ParamVec):
        if p.mode is not mode:
            raise ModeError(f"expected {mode.value} parameters, got {p.mode.value}")
        return p.p
    p = np.asarray(p)
    if p.shape[-1:] != (mode.dof,):
        raise ModeError(f"{mode.value} expects {mode.dof} parameters, got shape {p.shape}")
    return p


def build_affine_theta(p) -> np.ndarray:
    p = _as_params(p, Mode.AFFINE)
    m = np.zeros(p.shape[:-1] + (4, 4), dtype=p.dtype if p.dtype.kind == "f" else np.float64)
    m[..., :3, :] = p.reshape(p.shape[:-1] + (3, 4))
    m[..., 0, 0] += 1.0
    m[..., 1, 1] += 1.0
    m[..., 2, 2] += 1.0
    m[..., 3, 3] = 1.0
    return m


def build_affine_theta_backward(dtheta: np.ndarray) -> np.ndarray:
    lead = dtheta.shape[:-2]
    return dtheta[..., :3, :].reshape(lead + (12,)).copy()


def build_attention_theta(p) -> np.ndarray:
    p = _as_params(p, Mode.ATTENTION)
    m = np.zeros(p.shape[:-1] + (4, 4), dtype=p.dtype if p.dtype.kind == "f" else np.float64)
    for k, (r, c) in enumerate(_ATT_ENTRIES):
        m[..., r, c] = p[..., k]
    m[..., 0, 0] += 1.0
    m[..., 1, 1] += 1.0
    m[..., 2, 2] += 1.0
    m[..., 3, 3] = 1.0
    return m


def build_attention_theta_backward(dtheta: np.ndarray) -> np.ndarray:
    return np.stack([dtheta[..., r, c] for r, c in _ATT_ENTRIES], axis=-1)


def embed_attention(p) -> np.ndarray:
    """Place attention parameters into the matching slots of an affine 12-vector."""
    p = _as_params(p, Mode.ATTENTION)
    out = np.zeros(p.shape[:-1] + (12,), dtype=p.dtype)
    out[..., _ATT_TO_AFFINE] = p
    return out


def build_theta(mode, p) -> np.ndarray:
    mode = Mode(mode)
    return build_affine_theta(p) if mode is Mode.AFFINE else build_attention_theta(p)


def build_theta_backward(mode, dtheta: np.ndarray) -> np.ndarray:
    mode = Mode(mode)
    if mode is Mode.AFFINE:
        return build_affine_theta_backward(dtheta)
    return build_attention_theta_backward(dtheta)


def check_theta(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (4, 4):
        raise ParseError(f"theta must be 4x4, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError("theta has non-finite entries")
    if not np.array_equal(m[3], _LAST_ROW):
        raise ParseError("theta's last row must be exactly (0, 0, 0, 1)")
    return m


def identity() -> np.ndarray:
    return np.eye(4)


def translation(t: float = 0.0, x: float = 0.0, y: float = 0.0) -> np.ndarray:
    m = np.eye(4)
    m[:3, 3] = (t, x, y)
    return m


def compose(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product a @ b; applying the result equals applying b, then a."""
    out = np.asarray(a) @ np.asarray(b)
    out[..., 3, :] = _LAST_ROW
    return out


def invert(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    block = a[:3, :3]
    if abs(np.linalg.det(block)) <= SINGULAR_DET:
        raise SingularityError(f"linear block is singular (|det| <= {SINGULAR_DET})")
    inv_block = np.linalg.inv(block)
    out = np.eye(4)
    out[:3, :3] = inv_block
    out[:3, 3] = -inv_block @ a[:3, 3]
    return out


def format_theta(m) -> str:
    m = check_theta(m)
    return " ".join(repr(float(v)) for v in m.ravel())


def parse_theta(text: str) -> np.ndarray:
    tokens = text.split()
    if len(tokens) != 16:
        raise ParseError(f"theta needs 16 numbers, got {len(tokens)}")
    try:
        values = [float(tok) for tok in tokens]
    except ValueError as exc:
        raise ParseError(f"bad theta literal: {exc}") from None
    return check_theta(np.array(values).reshape(4, 4))
