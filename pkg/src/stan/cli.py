"""``stan`` command-line entry point.

Every command reads an optional JSON config (unknown keys are rejected),
applies flag overrides, writes ``config.json`` with the fully resolved values
into ``--out``, and then writes its outputs there. Exit status: 0 success,
1 config or parse error, 2 numeric or training failure, 3 a configured
acceptance threshold was missed.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import gradcheck
from .errors import ConfigError, NumericError, PrecisionError, StanError
from .harness import report
from .harness.data import SyntheticSpec, gen_dataset
from .harness.experiments import ablate_insertion, position_label, transfer_fixed_D
from .harness.flops import count_flops, stan_overhead
from .harness.train import DTYPES, ModelConfig, TrainConfig, train_alignment, train_classify
from .io import save_checkpoint, write_pgm
from .layer import StanLayer
from .tensor import load_snapshot
from .transform import format_theta, parse_theta
from .warp import warp

log = logging.getLogger("stan")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_THRESHOLD = 0, 1, 2, 3


class ThresholdMiss(Exception):
    pass


def _strict(d: dict, allowed: set, where: str) -> dict:
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")
    return d


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None


def _dataset_spec(d: dict, seed: int) -> SyntheticSpec:
    d = dict(d)
    d.setdefault("seed", seed)
    return SyntheticSpec.from_dict(d)


def _train_cfg(d: dict, seed: int, **defaults) -> TrainConfig:
    d = {**defaults, **d}
    d.setdefault("seeds", [seed, seed + 1, seed + 2])
    return TrainConfig.from_dict(d)


def _write_outputs(out: Path, rows, summary: str | None = None):
    report.write_csv(rows, out / "metrics.csv")
    text = summary if summary is not None else report.summary_text(rows)
    (out / "summary.txt").write_text(text)
    print(text, end="")


# -- commands ---------------------------------------------------------------------

def cmd_gradcheck(cfg: dict, args) -> tuple[dict, int]:
    _strict(cfg, {"cases", "ops"}, "gradcheck")
    if args.dtype != "f64":
        raise PrecisionError("gradient checks need f64; finite differences are meaningless in f32")
    ops = cfg.get("ops", list(gradcheck.CHECKS))
    for op in ops:
        if op not in gradcheck.CHECKS:
            raise ConfigError(f"unknown gradcheck op {op!r}")
    cases = int(cfg.get("cases", 50))
    resolved = {"cases": cases, "ops": list(ops)}
    _save_resolved(args, resolved)

    rows, failed = [], []
    for op in ops:
        try:
            res = gradcheck.run_check(op, cases, args.seed)
        except NumericError as exc:
            raise NumericError(f"{op}: {exc}") from None
        rows.append(("gradcheck", args.seed, 0, "check", f"{op}.worst_rel_error", res.worst))
        rows.append(("gradcheck", args.seed, 0, "check", f"{op}.cases", float(res.cases)))
        if not res.passed:
            failed.append(op)
    table = report.format_table(("op", "cases", "worst_rel_error", "status"), [
        (r[4].split(".")[0], int(c[5]), f"{r[5]:.3e}", "ok" if r[5] < gradcheck.TOLERANCE else "FAIL")
        for r, c in zip(rows[::2], rows[1::2])])
    _write_outputs(args.out, rows, table)
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        raise ThresholdMiss(", ".join(failed))
    return resolved, EXIT_OK


def _blob_clip(d: dict) -> np.ndarray:
    _strict(d, {"shape", "center", "sigma"}, "blob")
    C, T, H, W = (int(v) for v in d.get("shape", (1, 4, 32, 32)))
    cx, cy = (float(v) for v in d.get("center", (0.3, -0.2)))
    sigma = float(d.get("sigma", 0.15))
    xs = np.linspace(-1, 1, W) if W > 1 else np.zeros(1)
    ys = np.linspace(-1, 1, H) if H > 1 else np.zeros(1)
    frame = np.exp(-((xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2) / (2 * sigma ** 2))
    return np.broadcast_to(frame, (1, C, T, H, W)).astype(np.float64)


def _frame_stats(frame: np.ndarray):
    """(centroid x, centroid y, area above half max) in pixel units."""
    mass = frame.sum()
    if mass <= 0:
        return float("nan"), float("nan"), 0.0
    ys, xs = np.indices(frame.shape)
    return (float((xs * frame).sum() / mass), float((ys * frame).sum() / mass),
            float(np.count_nonzero(frame >= 0.5 * frame.max())))


def cmd_demo_warp(cfg: dict, args) -> tuple[dict, int]:
    _strict(cfg, {"input", "blob", "theta", "theta_file"}, "demo-warp")
    if "input" in cfg and "blob" in cfg:
        raise ConfigError("give either input or blob, not both")
    if "theta" in cfg and "theta_file" in cfg:
        raise ConfigError("give either theta or theta_file, not both")
    if "theta_file" in cfg:
        text = Path(cfg["theta_file"]).read_text()
    else:
        raw = cfg.get("theta", format_theta(np.eye(4)))
        text = raw if isinstance(raw, str) else " ".join(str(v) for v in raw)
    theta = parse_theta(text)
    if "input" in cfg:
        x = load_snapshot(cfg["input"])[:1].astype(DTYPES[args.dtype])
        source = {"input": str(cfg["input"])}
    else:
        blob = dict(cfg.get("blob", {}))
        x = _blob_clip(blob).astype(DTYPES[args.dtype])
        source = {"blob": {"shape": list(x.shape[1:]), **{k: blob[k] for k in blob if k != "shape"}}}
    resolved = {**source, "theta": format_theta(theta)}
    _save_resolved(args, resolved)

    y = warp(theta, x)
    (args.out / "theta.txt").write_text(format_theta(theta) + "\n")
    rows = []
    for name, clip in (("original", x[0]), ("warped", y[0])):
        d = args.out / name
        d.mkdir(exist_ok=True)
        for c in range(clip.shape[0]):
            for t in range(clip.shape[1]):
                write_pgm(d / f"c{c}_t{t:03d}.pgm", clip[c, t])
                cx, cy, area = _frame_stats(clip[c, t])
                frame = f"c{c}_t{t:03d}"
                rows += [("demo-warp", args.seed, t, name, f"{frame}.centroid_x", cx),
                         ("demo-warp", args.seed, t, name, f"{frame}.centroid_y", cy),
                         ("demo-warp", args.seed, t, name, f"{frame}.area", area)]
    report.write_csv(rows, args.out / "metrics.csv")
    return resolved, EXIT_OK


def cmd_train_align(cfg: dict, args) -> tuple[dict, int]:
    _strict(cfg, {"dataset", "train", "scale", "mode", "max_ratio"}, "train-align")
    spec = _dataset_spec(cfg.get("dataset", {}), args.seed)
    tcfg = _train_cfg(cfg.get("train", {}), args.seed, loss="alignment_mse")
    scale, mode = cfg.get("scale", "medium"), cfg.get("mode", "attention")
    max_ratio = cfg.get("max_ratio")
    resolved = {"dataset": spec.to_dict(), "train": tcfg.to_dict(), "scale": scale,
                "mode": mode, "max_ratio": max_ratio}
    _save_resolved(args, resolved)

    data = gen_dataset(spec).astype(DTYPES[args.dtype])
    rows, ratios = [], []
    for seed in tcfg.seeds:
        layer = StanLayer.build(spec.clip_shape[0], scale, mode, residual=False, seed=seed,
                                dtype=DTYPES[args.dtype])
        m = train_alignment(layer, data, tcfg, seed=seed, experiment="align")
        rows += m.rows
        ratios.append(m.extra["ratio"])
        save_checkpoint(layer.named_params(), args.out / f"checkpoint_seed{seed}")
    _write_outputs(args.out, rows)
    if max_ratio is not None and max(ratios) >= max_ratio:
        raise ThresholdMiss(f"alignment ratio {max(ratios):.4f} >= {max_ratio}")
    return resolved, EXIT_OK


def _classify_setup(cfg: dict, args, extra_keys=()):
    _strict(cfg, {"dataset", "model", "train", *extra_keys}, args.command)
    spec = _dataset_spec(cfg.get("dataset", {}), args.seed)
    model = ModelConfig.from_dict({"dtype": args.dtype, **cfg.get("model", {})})
    tcfg = _train_cfg(cfg.get("train", {}), args.seed)
    return spec, model, tcfg


def _metric_rows(exp: str, m) -> list:
    return [(exp, "all", 0, "model", "params", float(m.params)),
            (exp, "all", 0, "model", "flops", float(m.flops))]


def cmd_train_classify(cfg: dict, args) -> tuple[dict, int]:
    spec, model, tcfg = _classify_setup(cfg, args)
    resolved = {"dataset": spec.to_dict(), "model": model.to_dict(), "train": tcfg.to_dict()}
    _save_resolved(args, resolved)
    data = gen_dataset(spec).astype(DTYPES[model.dtype])
    exp = "classify" if model.stan_position is None else "classify+stan"
    m = train_classify(model, data, tcfg, experiment=exp)
    _write_outputs(args.out, m.rows + _metric_rows(exp, m))
    return resolved, EXIT_OK


def _parse_position(p):
    if p is None or p == "none":
        return None
    if isinstance(p, bool) or not isinstance(p, int):
        raise ConfigError(f"position must be an integer or 'none', got {p!r}")
    return p


def cmd_ablate(cfg: dict, args) -> tuple[dict, int]:
    spec, model, tcfg = _classify_setup(cfg, args, ("positions",))
    positions = [_parse_position(p) for p in cfg.get("positions", ["none", 0, 1, 2])]
    resolved = {"dataset": spec.to_dict(), "model": model.to_dict(), "train": tcfg.to_dict(),
                "positions": [position_label(p) if p is None else p for p in positions]}
    _save_resolved(args, resolved)
    data = gen_dataset(spec).astype(DTYPES[model.dtype])
    results = ablate_insertion(positions, data, model, tcfg)
    rows = []
    for label, m in results.items():
        rows += m.rows + _metric_rows(f"position={label}", m)
    _write_outputs(args.out, rows)
    return resolved, EXIT_OK


def cmd_transfer(cfg: dict, args) -> tuple[dict, int]:
    _strict(cfg, {"source", "target", "model", "train"}, "transfer")
    source = _dataset_spec(cfg.get("source", {}), args.seed)
    target = _dataset_spec(cfg.get("target", {}), args.seed + 1)
    if source.clip_shape != target.clip_shape:
        raise ConfigError(f"clip shapes differ: {source.clip_shape} vs {target.clip_shape}")
    model = ModelConfig.from_dict({"dtype": args.dtype, **cfg.get("model", {})})
    tcfg = _train_cfg(cfg.get("train", {}), args.seed)
    resolved = {"source": source.to_dict(), "target": target.to_dict(),
                "model": model.to_dict(), "train": tcfg.to_dict()}
    _save_resolved(args, resolved)
    dtype = DTYPES[model.dtype]
    results = transfer_fixed_D(gen_dataset(source).astype(dtype), gen_dataset(target).astype(dtype),
                               model, tcfg)
    rows = []
    for name, m in results.items():
        rows += m.rows + _metric_rows(f"transfer.{name}", m)
    _write_outputs(args.out, rows)
    if not results["fixed_D"].extra["frozen_identical"]:
        raise ThresholdMiss("frozen deformation weights changed during fine-tuning")
    return resolved, EXIT_OK


def cmd_report(cfg: dict, args) -> tuple[dict, int]:
    _strict(cfg, {"metrics", "split", "overhead_shape"}, "report")
    paths = [str(p) for p in cfg.get("metrics", [])]
    split = cfg.get("split", "test")
    shape = [int(v) for v in cfg.get("overhead_shape", (1, 1, 8, 32, 32))]
    resolved = {"metrics": paths, "split": split, "overhead_shape": shape}
    _save_resolved(args, resolved)

    rows = []
    for p in paths:
        try:
            rows += report.rows_from_dicts(report.read_csv(p))
        except (OSError, KeyError) as exc:
            raise ConfigError(f"{p}: cannot read metrics ({exc})") from None
    text = report.summary_text(rows, split) if rows else ""
    # FLOP overhead of the default toy model at each insertion point
    model_rows = []
    for pos in range(len(ModelConfig().widths) + 1):
        net = ModelConfig(stan_position=pos).build(shape[1], 4, seed=0)
        stan, total, frac = stan_overhead(net, shape)
        model_rows.append((f"position={pos}", total, stan, 100 * frac))
        rows.append(("report", "all", 0, "flops", f"position={pos}.overhead_fraction", frac))
    base = count_flops(ModelConfig(stan_position=None).build(shape[1], 4, seed=0), shape)
    text += "\n" + report.format_table(
        ("model", "flops", "stan_flops", "overhead_%"),
        [("backbone", base, 0, 0.0)] + model_rows)
    _write_outputs(args.out, rows, text)
    return resolved, EXIT_OK


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "demo-warp": cmd_demo_warp,
    "train-align": cmd_train_align,
    "train-classify": cmd_train_classify,
    "ablate": cmd_ablate,
    "transfer": cmd_transfer,
    "report": cmd_report,
}


def _save_resolved(args, resolved: dict):
    args.out.mkdir(parents=True, exist_ok=True)
    full = {"command": args.command, "seed": args.seed, "dtype": args.dtype,
            "threads": args.threads, "config": resolved}
    (args.out / "config.json").write_text(json.dumps(full, indent=2, sort_keys=True) + "\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stan", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", type=Path, help="JSON config file")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--out", type=Path, default=None, help="output directory")
    parser.add_argument("--dtype", choices=sorted(DTYPES), default=None,
                        help="f64 for gradcheck, f32 otherwise")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.dtype is None:
        args.dtype = "f64" if args.command == "gradcheck" else "f32"
    if args.out is None:
        args.out = Path("stan-out") / args.command
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = _load_config(args.config)
        with threadpool_limits(limits=args.threads):
            _, status = COMMANDS[args.command](cfg, args)
        return status
    except ThresholdMiss as exc:
        print(f"threshold missed: {exc}", file=sys.stderr)
        return EXIT_THRESHOLD
    except (ConfigError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except StanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
