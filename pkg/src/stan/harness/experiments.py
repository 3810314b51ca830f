"""Desk-scale ablations: backbone vs. backbone+alignment, insertion depth, and
transfer of a frozen deformation network across datasets."""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from ..errors import ConfigError
from .data import Dataset
from .flops import count_flops
from .train import Metrics, ModelConfig, TrainConfig, fit_classifier, train_classify


def position_label(position) -> str:
    return "none" if position is None else str(position)


def compare_stan(data: Dataset, model_cfg: ModelConfig, cfg: TrainConfig) -> dict[str, Metrics]:
    """Train the plain backbone and the backbone with alignment on the same data
    and seeds."""
    base_cfg = replace(model_cfg, stan_position=None)
    return {
        "backbone": train_classify(base_cfg, data, cfg, experiment="backbone"),
        "backbone+stan": train_classify(model_cfg, data, cfg, experiment="backbone+stan"),
    }


def ablate_insertion(positions, data: Dataset, model_cfg: ModelConfig,
                     cfg: TrainConfig) -> dict[str, Metrics]:
    """One ``train_classify`` run per insertion position, sharing seeds (and so
    the data order)."""
    out = {}
    for pos in positions:
        label = position_label(pos)
        out[label] = train_classify(replace(model_cfg, stan_position=pos), data, cfg,
                                    experiment=f"position={label}")
    return out


def _num_classes(ds: Dataset) -> int:
    return int(ds.spec.num_classes if ds.spec else ds.labels.max() + 1)


def _pretrained(model_cfg: ModelConfig, source_train: Dataset, source_test: Dataset,
                num_classes: int, in_ch: int, cfg: TrainConfig, seed: int, experiment: str):
    """Train on the source task, then return a target-task model that carries
    every source weight except the re-initialized classifier head."""
    src = model_cfg.build(in_ch, _num_classes(source_train), seed)
    _, _, rows = fit_classifier(src, source_train, source_test, cfg, seed, experiment)
    model = model_cfg.build(in_ch, num_classes, seed)
    src_params = dict(src.named_params())
    for name, p in model.named_params():
        if not name.startswith("fc."):
            p.value[...] = src_params[name].value
    return model, rows


def transfer_fixed_D(source: Dataset, target: Dataset, model_cfg: ModelConfig,
                     cfg: TrainConfig) -> dict[str, Metrics]:
    """Pre-train backbone+alignment on ``source``, freeze the deformation
    network and fine-tune everything else on ``target``. The baseline is a
    plain backbone given the same source pre-training and target
    fine-tuning, so the comparison isolates the frozen alignment layer.
    Classifier heads are re-initialized for the target classes.
    """
    if source.x.shape[1:] != target.x.shape[1:]:
        raise ConfigError(f"clip shapes differ: {source.x.shape[1:]} vs {target.x.shape[1:]}")
    if model_cfg.stan_position is None:
        raise ConfigError("transfer needs a model with an alignment layer")
    src_train, src_test = source.split(cfg.test_fraction)
    tgt_train, tgt_test = target.split(cfg.test_fraction)
    in_ch = source.x.shape[1]
    k = _num_classes(target)
    shape = (1,) + target.x.shape[1:]
    base_cfg = replace(model_cfg, stan_position=None)

    transfer, baseline = Metrics(), Metrics()
    frozen_ok = True
    for seed in cfg.seeds:
        model, rows = _pretrained(model_cfg, src_train, src_test, k, in_ch, cfg, seed,
                                  "transfer.source")
        transfer.rows += rows
        for p in model.stan.params():
            p.frozen = True
        frozen_before = [p.value.copy() for p in model.stan.params()]
        acc, curve, rows = fit_classifier(model, tgt_train, tgt_test, cfg, seed,
                                          experiment="transfer.fixed_D")
        same = all(np.array_equal(a, p.value) for a, p in zip(frozen_before, model.stan.params()))
        frozen_ok &= same
        transfer.per_seed.append(acc)
        transfer.loss_curve.append(curve)
        transfer.rows += rows + [("transfer.fixed_D", seed, cfg.epochs, "test",
                                  "frozen_identical", float(same))]

        base, rows = _pretrained(base_cfg, src_train, src_test, k, in_ch, cfg, seed,
                                 "transfer.baseline_source")
        baseline.rows += rows
        acc, curve, rows = fit_classifier(base, tgt_train, tgt_test, cfg, seed,
                                          experiment="transfer.baseline")
        baseline.per_seed.append(acc)
        baseline.loss_curve.append(curve)
        baseline.rows += rows

    transfer.accuracy, baseline.accuracy = transfer.mean, baseline.mean
    transfer.extra["frozen_identical"] = frozen_ok
    transfer.params = sum(p.size for p in model.params())
    transfer.flops = count_flops(model, shape)
    baseline.params = sum(p.size for p in base.params())
    baseline.flops = count_flops(base, shape)
    return {"fixed_D": transfer, "baseline": baseline}
