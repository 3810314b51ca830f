import json

import numpy as np
import pytest

from stan import cli, warp
from stan.io import read_pgm
from stan.tensor import save_snapshot

TINY = {
    "dataset": {"num_classes": 3, "clip_shape": [1, 4, 8, 8], "num_samples": 18},
    "model": {"widths": [4, 8], "stem_width": 4, "stan_position": 1, "stan_scale": "small"},
    "train": {"epochs": 1, "seeds": [0]},
}


def run(tmp_path, command, config=None, *flags, name="out"):
    argv = [command, "--out", str(tmp_path / name)]
    if config is not None:
        path = tmp_path / f"{name}.json"
        path.write_text(json.dumps(config))
        argv += ["--config", str(path)]
    return cli.main(argv + list(flags)), tmp_path / name


def test_gradcheck_default_ops(tmp_path, capsys):
    code, out = run(tmp_path, "gradcheck", {"cases": 2})
    assert code == 0
    printed = capsys.readouterr().out
    assert "trilinear" in printed and "stan" in printed and "worst_rel_error" in printed
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["dtype"] == "f64" and cfg["config"]["cases"] == 2


def test_gradcheck_refuses_f32(tmp_path, capsys):
    code, _ = run(tmp_path, "gradcheck", None, "--dtype", "f32")
    assert code == cli.EXIT_CONFIG
    assert "f64" in capsys.readouterr().err


def test_gradcheck_names_mutated_op(tmp_path, monkeypatch, capsys):
    original = warp._backward_item

    def sign_flipped(x_flat, c, up):
        dx, dgrid = original(x_flat, c, up)
        return dx, -dgrid

    monkeypatch.setattr(warp, "_backward_item", sign_flipped)
    code, _ = run(tmp_path, "gradcheck", {"cases": 2, "ops": ["linear", "trilinear"]})
    assert code == cli.EXIT_THRESHOLD
    err = capsys.readouterr().err
    assert "trilinear" in err and "linear," not in err


def test_unknown_keys_are_config_errors(tmp_path):
    assert run(tmp_path, "gradcheck", {"casez": 2})[0] == cli.EXIT_CONFIG
    bad = dict(TINY, train={"epochz": 1})
    assert run(tmp_path, "train-classify", bad)[0] == cli.EXIT_CONFIG
    assert run(tmp_path, "ablate", dict(TINY, extra=1))[0] == cli.EXIT_CONFIG


def test_missing_or_broken_config_file(tmp_path):
    assert cli.main(["report", "--config", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    (tmp_path / "b.json").write_text("{not json")
    assert cli.main(["report", "--config", str(tmp_path / "b.json"),
                     "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG


def test_demo_warp_bad_theta_count(tmp_path):
    code, _ = run(tmp_path, "demo-warp", {"theta": "1 0 0 0 0 1 0 0 0 0 1 0 0 0 0"})
    assert code == cli.EXIT_CONFIG


def test_demo_warp_identity_frames_match(tmp_path):
    code, out = run(tmp_path, "demo-warp", {"blob": {"shape": [2, 3, 16, 20]}})
    assert code == 0
    frames = sorted(p.name for p in (out / "original").iterdir())
    assert len(frames) == 6
    for name in frames:
        assert (out / "original" / name).read_bytes() == (out / "warped" / name).read_bytes()
    assert (out / "theta.txt").read_text().split() == [
        repr(float(v)) for v in np.eye(4).ravel()]


def test_demo_warp_translation_moves_centroid(tmp_path):
    W, H = 32, 24
    tx, ty = 0.2, -0.1
    theta = f"1 0 0 0  0 1 0 {tx}  0 0 1 {ty}  0 0 0 1"
    code, out = run(tmp_path, "demo-warp", {
        "blob": {"shape": [1, 2, H, W], "center": [0.1, 0.1], "sigma": 0.12}, "theta": theta})
    assert code == 0
    # source = output + shift, so content moves by -shift; scale by (L-1)/2 to pixels
    expected = (-tx * (W - 1) / 2, -ty * (H - 1) / 2)

    def centroid(path):
        img = read_pgm(path).astype(np.float64)
        ys, xs = np.indices(img.shape)
        return (xs * img).sum() / img.sum(), (ys * img).sum() / img.sum()

    for t in range(2):
        a = centroid(out / "original" / f"c0_t{t:03d}.pgm")
        b = centroid(out / "warped" / f"c0_t{t:03d}.pgm")
        assert abs((b[0] - a[0]) - expected[0]) <= 0.5
        assert abs((b[1] - a[1]) - expected[1]) <= 0.5


@pytest.mark.parametrize("scale,grows", [(0.7, False), (-0.4, True)])
def test_demo_warp_spatial_scale_changes_area(tmp_path, scale, grows):
    s = 1 + scale
    theta = f"1 0 0 0  0 {s} 0 0  0 0 {s} 0  0 0 0 1"
    code, out = run(tmp_path, "demo-warp", {"blob": {"shape": [1, 1, 32, 32], "center": [0, 0]},
                                            "theta": theta})
    assert code == 0
    a = np.count_nonzero(read_pgm(out / "original" / "c0_t000.pgm") >= 128)
    b = np.count_nonzero(read_pgm(out / "warped" / "c0_t000.pgm") >= 128)
    assert (b > a) if grows else (b < a)


def test_demo_warp_from_snapshot(tmp_path):
    x = np.random.default_rng(0).standard_normal((1, 1, 2, 4, 5)).astype(np.float32)
    save_snapshot(tmp_path / "clip.snap", x)
    code, out = run(tmp_path, "demo-warp", {"input": str(tmp_path / "clip.snap")})
    assert code == 0 and len(list((out / "warped").iterdir())) == 2


def test_train_align_writes_checkpoint(tmp_path):
    cfg = {"dataset": {"clip_shape": [4, 2, 8, 8], "num_samples": 12, "background": "ramp",
                       "perturb_low": [0, 0, 0, 0, -0.2, -0.2], "perturb_high": [0, 0, 0, 0, 0.2, 0.2]},
           "train": {"steps": 2, "seeds": [0]}, "scale": "small"}
    code, out = run(tmp_path, "train-align", cfg)
    assert code == 0
    assert (out / "checkpoint_seed0" / "manifest.txt").exists()
    assert "ratio" in (out / "metrics.csv").read_text()
    cfg["max_ratio"] = 1e-9
    assert run(tmp_path, "train-align", cfg, name="strict")[0] == cli.EXIT_THRESHOLD


def test_ablate_cardinality(tmp_path):
    cfg = dict(TINY, positions=["none", 0, 1, 2], train={"epochs": 1, "seeds": [0, 1]})
    code, out = run(tmp_path, "ablate", cfg)
    assert code == 0
    text = (out / "metrics.csv").read_text().splitlines()
    acc = [line for line in text if ",test,accuracy," in line]
    assert len(acc) == 4 * 2
    resolved = json.loads((out / "config.json").read_text())["config"]
    assert resolved["positions"] == ["none", 0, 1, 2]
    assert resolved["model"]["dtype"] == "f32"


def test_transfer_shape_mismatch_is_config_error(tmp_path):
    cfg = {"source": TINY["dataset"], "target": dict(TINY["dataset"], clip_shape=[1, 4, 8, 6]),
           "model": TINY["model"], "train": TINY["train"]}
    assert run(tmp_path, "transfer", cfg)[0] == cli.EXIT_CONFIG


def test_transfer_runs(tmp_path):
    cfg = {"source": TINY["dataset"], "target": dict(TINY["dataset"], phase=0.5),
           "model": TINY["model"], "train": TINY["train"]}
    code, out = run(tmp_path, "transfer", cfg)
    assert code == 0
    assert "frozen_identical,1.0" in (out / "metrics.csv").read_text()


def test_report_merges_metrics(tmp_path):
    code, out = run(tmp_path, "train-classify", TINY, name="cls")
    assert code == 0
    code, rep = run(tmp_path, "report", {"metrics": [str(out / "metrics.csv")]}, name="rep")
    assert code == 0
    summary = (rep / "summary.txt").read_text()
    assert "classify+stan" in summary and "overhead_%" in summary


def test_training_failure_exit_code(tmp_path):
    cfg = dict(TINY, train={"epochs": 1, "seeds": [0], "lr": 1e30})
    assert run(tmp_path, "train-classify", cfg)[0] == cli.EXIT_NUMERIC


def test_seed_flag_feeds_dataset_and_seeds(tmp_path):
    cfg = {k: v for k, v in TINY.items() if k != "train"}
    cfg["train"] = {"epochs": 1}
    code, out = run(tmp_path, "train-classify", cfg, "--seed", "7")
    resolved = json.loads((out / "config.json").read_text())
    assert code == 0 and resolved["seed"] == 7
    assert resolved["config"]["dataset"]["seed"] == 7
    assert resolved["config"]["train"]["seeds"] == [7, 8, 9]
