"""Synthetic video clips with class-defined motion and a random "camera"
transform per clip, recorded as ground truth.

Each clip shows a Gaussian blob moving in a straight line; the class fixes the
direction. Optional static background ramps give every channel some
position-dependent texture. The camera transform is drawn per clip from
box bounds on the transform parameters and applied with the warp module, so
``warp(invert(theta), x)`` approximately recovers the clean render.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ..errors import ConfigError, SpecError
from ..tensor import load_snapshot, save_snapshot
from ..transform import Mode, build_theta
from ..warp import make_output_grid, warp

# parameter slots of the attention family: (t, x, y) scale then (t, x, y) shift
TRANSLATION_SLOTS = {"t": 3, "x": 4, "y": 5}


@dataclass
class SyntheticSpec:
    num_classes: int = 4
    clip_shape: tuple = (1, 8, 16, 16)
    num_samples: int = 128
    motion: str = "direction"
    phase: float = 0.0          # rotates class directions by phase * 2pi/K
    speed: float = 0.9          # normalized distance covered over the clip
    blob_sigma: float = 0.2
    jitter: float = 0.2         # uniform start-position jitter (normalized)
    background: str = "none"    # "none" | "ramp"
    background_amplitude: float = 0.3
    perturbation: str = "attention"
    perturb_low: list = field(default_factory=lambda: [0.0] * 6)
    perturb_high: list = field(default_factory=lambda: [0.0] * 6)
    noise: float = 0.02
    min_mass_fraction: float = 0.6
    max_rejections: int = 10000
    seed: int = 0

    def __post_init__(self):
        self.clip_shape = tuple(int(v) for v in self.clip_shape)
        if len(self.clip_shape) != 4 or min(self.clip_shape) < 1:
            raise ConfigError(f"clip_shape must be (C, T, H, W), got {self.clip_shape}")
        if self.num_classes < 1 or self.num_samples < 1:
            raise ConfigError("num_classes and num_samples must be positive")
        if self.motion != "direction":
            raise ConfigError(f"unknown motion family {self.motion!r}")
        if self.background not in ("none", "ramp"):
            raise ConfigError(f"unknown background {self.background!r}")
        dof = Mode(self.perturbation).dof
        self.perturb_low = [float(v) for v in self.perturb_low]
        self.perturb_high = [float(v) for v in self.perturb_high]
        if len(self.perturb_low) != dof or len(self.perturb_high) != dof:
            raise ConfigError(f"{self.perturbation} perturbation bounds need {dof} entries")
        if any(lo > hi for lo, hi in zip(self.perturb_low, self.perturb_high)):
            raise ConfigError("perturbation lower bound exceeds upper bound")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown dataset keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["clip_shape"] = list(self.clip_shape)
        return d


def translation_bounds(t: float = 0.0, x: float = 0.0, y: float = 0.0):
    """Attention-family bounds for pure translations within +-(t, x, y)."""
    lo, hi = [0.0] * 6, [0.0] * 6
    for axis, amount in (("t", t), ("x", x), ("y", y)):
        lo[TRANSLATION_SLOTS[axis]] = -amount
        hi[TRANSLATION_SLOTS[axis]] = amount
    return lo, hi


@dataclass
class Dataset:
    x: np.ndarray          # perturbed clips (N, C, T, H, W), float32
    clean: np.ndarray      # clean renders, same shape
    labels: np.ndarray     # (N,) int64
    thetas: np.ndarray     # (N, 4, 4) ground-truth camera transforms
    spec: SyntheticSpec | None = None

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.x[idx], self.clean[idx], self.labels[idx], self.thetas[idx], self.spec)

    def astype(self, dtype) -> "Dataset":
        return Dataset(self.x.astype(dtype), self.clean.astype(dtype), self.labels,
                       self.thetas, self.spec)

    def split(self, test_fraction: float = 0.25):
        """Deterministic stratified split: the last share of every class is held out."""
        train, test = [], []
        for k in np.unique(self.labels):
            members = np.flatnonzero(self.labels == k)
            n_test = int(round(len(members) * test_fraction))
            train.extend(members[:len(members) - n_test])
            test.extend(members[len(members) - n_test:])
        return self.subset(np.sort(train)), self.subset(np.sort(test))


def _coords(T, H, W):
    g = make_output_grid(T, H, W)
    tt = (g[..., 0] + 1.0) / 2.0 if T > 1 else np.zeros((T, H, W))
    return tt, g[..., 1], g[..., 2]


def render_actor(spec: SyntheticSpec, label: int, rng: np.random.Generator) -> np.ndarray:
    """(T, H, W) blob moving along the class direction."""
    _, T, H, W = spec.clip_shape
    tt, xx, yy = _coords(T, H, W)
    angle = 2 * np.pi * (label + spec.phase) / spec.num_classes
    direction = np.array([np.cos(angle), np.sin(angle)])
    start = rng.uniform(-spec.jitter, spec.jitter, size=2)
    cx = start[0] + spec.speed * (tt - 0.5) * direction[0]
    cy = start[1] + spec.speed * (tt - 0.5) * direction[1]
    r2 = (xx - cx) ** 2 + (yy - cy) ** 2
    return np.exp(-r2 / (2 * spec.blob_sigma ** 2))


def render_background(spec: SyntheticSpec) -> np.ndarray:
    """(C, T, H, W) static ramps, one direction per channel."""
    C, T, H, W = spec.clip_shape
    out = np.zeros((C, T, H, W))
    if spec.background == "none":
        return out
    _, xx, yy = _coords(T, H, W)
    for c in range(C):
        a = 2 * np.pi * c / C
        out[c] = spec.background_amplitude * 0.5 * (1.0 + np.cos(a) * xx + np.sin(a) * yy)
    return out


def sample_theta(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    p = rng.uniform(spec.perturb_low, spec.perturb_high)
    return build_theta(spec.perturbation, p)


def gen_dataset(spec: SyntheticSpec) -> Dataset:
    C, T, H, W = spec.clip_shape
    rng = np.random.default_rng(spec.seed)
    background = render_background(spec)
    labels = np.arange(spec.num_samples) % spec.num_classes
    rng.shuffle(labels)
    xs = np.empty((spec.num_samples, C, T, H, W), dtype=np.float32)
    cleans = np.empty_like(xs)
    thetas = np.empty((spec.num_samples, 4, 4))
    rejections = 0
    for i, label in enumerate(labels):
        actor = render_actor(spec, int(label), rng)
        clean = background + actor[None]
        mass = actor.sum()
        while True:
            theta = sample_theta(spec, rng)
            moved = warp(theta, actor[None, None])[0, 0]
            if moved.sum() >= spec.min_mass_fraction * mass:
                break
            rejections += 1
            if rejections > spec.max_rejections:
                raise SpecError("perturbation range keeps pushing the actor out of frame")
        x = warp(theta, clean[None])[0] + spec.noise * rng.standard_normal((C, T, H, W))
        xs[i] = x
        cleans[i] = clean
        thetas[i] = theta
    return Dataset(xs, cleans, labels.astype(np.int64), thetas, spec)


def save_dataset(ds: Dataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_snapshot(d / "x.snap", ds.x)
    save_snapshot(d / "clean.snap", ds.clean)
    n = len(ds)
    save_snapshot(d / "labels.snap", ds.labels.astype(np.float32).reshape(1, 1, 1, 1, n))
    save_snapshot(d / "thetas.snap", ds.thetas.astype(np.float32).reshape(1, 1, n, 4, 4))
    manifest = {
        "spec": ds.spec.to_dict() if ds.spec else None,
        "buffers": {"x": list(ds.x.shape), "clean": list(ds.clean.shape),
                    "labels": [n], "thetas": [n, 4, 4]},
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    spec = SyntheticSpec.from_dict(manifest["spec"]) if manifest["spec"] else None
    n = manifest["buffers"]["labels"][0]
    return Dataset(
        load_snapshot(d / "x.snap"),
        load_snapshot(d / "clean.snap"),
        load_snapshot(d / "labels.snap").reshape(n).astype(np.int64),
        load_snapshot(d / "thetas.snap").reshape(n, 4, 4).astype(np.float64),
        spec,
    )
