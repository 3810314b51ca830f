"""Training and evaluation loops for the alignment and classification tasks."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from ..deformnet import Scale
from ..errors import ConfigError, TrainingError
from ..layer import StanLayer
from ..transform import Mode
from .backbone import DEFAULT_WIDTHS, ToyBackbone, count_params
from .data import Dataset
from .optim import make_optimizer

log = logging.getLogger(__name__)

DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 3e-3
    theta_lr_mult: float = 0.1
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 10
    steps: int | None = None        # overrides epochs when set
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    loss: str = "cross_entropy"     # "cross_entropy" | "alignment_mse"
    test_fraction: float = 0.25

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in ("cross_entropy", "alignment_mse"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.batch_size < 1 or self.epochs < 0 or (self.steps is not None and self.steps < 0):
            raise ConfigError("batch_size, epochs and steps must be non-negative")
        self.seeds = [int(s) for s in self.seeds]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def optimizer_kwargs(self) -> dict:
        return {"momentum": self.momentum} if self.optimizer == "sgd" else {}


@dataclass
class ModelConfig:
    """Backbone hyper-parameters; ``stan_position`` None means no alignment layer."""
    widths: tuple = DEFAULT_WIDTHS
    stem_width: int = 8
    stan_position: int | None = 2
    stan_scale: str = "medium"
    stan_mode: str = "affine"
    dtype: str = "f32"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        Scale(self.stan_scale)
        Mode(self.stan_mode)
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    def build(self, in_channels: int, num_classes: int, seed: int) -> ToyBackbone:
        return ToyBackbone(in_channels, num_classes, self.widths, self.stem_width,
                           self.stan_position, self.stan_scale, self.stan_mode, seed=seed,
                           dtype=DTYPES[self.dtype])


@dataclass
class Metrics:
    accuracy: float | None = None
    loss_curve: list = field(default_factory=list)
    params: int = 0
    flops: int = 0
    per_seed: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)   # (experiment, seed, epoch, split, metric, value)

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_seed)) if self.per_seed else float("nan")

    @property
    def std(self) -> float:
        return float(np.std(self.per_seed)) if self.per_seed else float("nan")


# -- losses -----------------------------------------------------------------------

def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, (grad / n).astype(logits.dtype)


def mse(pred: np.ndarray, target: np.ndarray):
    diff = pred.astype(np.float64) - target
    loss = float(np.mean(diff ** 2))
    return loss, (2.0 * diff / diff.size).astype(pred.dtype)


def _check_finite(loss: float, what: str):
    if not np.isfinite(loss):
        raise TrainingError(f"{what} loss became non-finite")


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# -- alignment task ---------------------------------------------------------------

def alignment_mse(layer: StanLayer | None, data: Dataset, batch_size: int = 64) -> float:
    """MSE between the aligned clips and the clean renders; ``layer=None``
    gives the identity baseline."""
    total, count = 0.0, 0
    for start in range(0, len(data), batch_size):
        x = data.x[start:start + batch_size]
        out = x if layer is None else layer.forward(x)[0]
        d = out.astype(np.float64) - data.clean[start:start + batch_size]
        total += float(np.sum(d * d))
        count += d.size
    return total / count


def train_alignment(layer: StanLayer, data: Dataset, cfg: TrainConfig, seed: int = 0,
                    experiment: str = "align") -> Metrics:
    """Fit the deformation network so that warping the perturbed clip by its
    prediction reproduces the clean render. Reports held-out MSE against the
    identity baseline."""
    if layer.residual:
        raise ConfigError("alignment training needs the residual path off")
    train, test = data.split(cfg.test_fraction)
    head = [p for _, p in layer.deform.head.params()]
    body = [p for p in layer.params() if not any(p is h for h in head)]
    groups = [(body, 1.0), (head, cfg.theta_lr_mult)]
    opt = make_optimizer(cfg.optimizer, groups, cfg.lr, **cfg.optimizer_kwargs())
    rng = np.random.default_rng(seed)
    steps = cfg.steps if cfg.steps is not None else cfg.epochs * -(-len(train) // cfg.batch_size)
    m = Metrics(params=layer.num_params())
    step = 0
    while step < steps:
        for idx in _batches(len(train), cfg.batch_size, rng):
            if step >= steps:
                break
            opt.zero_grad()
            out, _ = layer.forward(train.x[idx])
            loss, dout = mse(out, train.clean[idx])
            _check_finite(loss, "alignment")
            layer.backward(dout)
            opt.step()
            m.loss_curve.append(loss)
            m.rows.append((experiment, seed, step, "train", "mse", loss))
            step += 1
    base = alignment_mse(None, test)
    final = alignment_mse(layer, test)
    _check_finite(final, "alignment")
    m.extra.update(alignment_mse=final, identity_mse=base, ratio=final / base, steps=steps)
    m.per_seed.append(final)
    m.rows += [(experiment, seed, steps, "test", "identity_mse", base),
               (experiment, seed, steps, "test", "alignment_mse", final),
               (experiment, seed, steps, "test", "ratio", final / base)]
    return m


# -- classification task ----------------------------------------------------------

def evaluate(model: ToyBackbone, data: Dataset, batch_size: int = 64):
    """(accuracy, mean cross-entropy) over ``data``."""
    correct, loss_sum = 0, 0.0
    for start in range(0, len(data), batch_size):
        x = data.x[start:start + batch_size]
        y = data.labels[start:start + batch_size]
        logits = model.forward(x)
        loss, _ = softmax_cross_entropy(logits, y)
        loss_sum += loss * len(y)
        correct += int(np.sum(logits.argmax(axis=1) == y))
    return correct / len(data), loss_sum / len(data)


def fit_classifier(model: ToyBackbone, train: Dataset, test: Dataset, cfg: TrainConfig,
                   seed: int, experiment: str = "classify") -> tuple[float, list, list]:
    """Train in place; returns (test accuracy, loss curve, csv rows)."""
    opt = make_optimizer(cfg.optimizer, model.param_groups(cfg.theta_lr_mult), cfg.lr,
                         **cfg.optimizer_kwargs())
    rng = np.random.default_rng(seed)
    curve, rows = [], []
    for epoch in range(cfg.epochs):
        total, n = 0.0, 0
        for idx in _batches(len(train), cfg.batch_size, rng):
            opt.zero_grad()
            logits = model.forward(train.x[idx])
            loss, dlogits = softmax_cross_entropy(logits, train.labels[idx])
            _check_finite(loss, "classification")
            model.backward(dlogits)
            opt.step()
            total += loss * len(idx)
            n += len(idx)
        curve.append(total / n)
        rows.append((experiment, seed, epoch, "train", "loss", total / n))
        log.debug("%s seed=%d epoch=%d loss=%.4f", experiment, seed, epoch, total / n)
    acc, test_loss = evaluate(model, test)
    rows += [(experiment, seed, cfg.epochs, "test", "accuracy", acc),
             (experiment, seed, cfg.epochs, "test", "loss", test_loss)]
    return acc, curve, rows


def train_classify(model_cfg: ModelConfig, data: Dataset, cfg: TrainConfig,
                   experiment: str = "classify", input_shape=None) -> Metrics:
    """Cross-entropy training, one fresh model per seed; accuracy on the
    held-out split, averaged over seeds."""
    from .flops import count_flops

    train, test = data.split(cfg.test_fraction)
    num_classes = int(data.spec.num_classes if data.spec else data.labels.max() + 1)
    in_ch = data.x.shape[1]
    m = Metrics()
    for seed in cfg.seeds:
        model = model_cfg.build(in_ch, num_classes, seed)
        acc, curve, rows = fit_classifier(model, train, test, cfg, seed, experiment)
        m.per_seed.append(acc)
        m.loss_curve.append(curve)
        m.rows += rows
        m.params = count_params(model)
        shape = input_shape or (1,) + data.x.shape[1:]
        m.flops = count_flops(model, shape)
    m.accuracy = m.mean
    return m


def with_position(model_cfg: ModelConfig, position) -> ModelConfig:
    return replace(model_cfg, stan_position=position)
