import csv
import subprocess
import sys

import numpy as np
import pytest

from splatlab.adc import ours_config
from splatlab.adc import DensifyStats
from splatlab.cli import eval_checkpoint, main
from splatlab.optim import AdamState
from splatlab.scene_io import save_dataset, synthetic_scene
from splatlab.trainer import TrainConfig, TrainState, ViewOrder, initialize, save_checkpoint

SMALL = dict(width=40, height=40, n_views=9, spread=12, n_large=3, n_small=12)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ds, _ = synthetic_scene("flat_targets", 4, **SMALL)
    save_dataset(ds, root / "data")
    adc = ours_config(densify_from=10, densify_until=60, densify_interval=10, opacity_reset_interval=40)
    cfg = TrainConfig(total_iterations=60, eval_every=15, flat_grid=6, adc=adc)
    cfg.save(root / "config.txt")
    return root, ds, cfg


def run_train(root, out, seed=0):
    return main(["train", "--dataset", str(root / "data"), "--config", str(root / "config.txt"),
                 "--seed", str(seed), "--out", str(out)])


def metrics_without_wall_time(path):
    with open(path) as fh:
        return [row[:-1] for row in csv.reader(fh)]


def test_train_writes_expected_outputs(workspace, tmp_path):
    root, _, cfg = workspace
    assert run_train(root, tmp_path / "run") == 0
    rows = metrics_without_wall_time(tmp_path / "run" / "metrics.csv")
    assert len(rows) - 1 == cfg.total_iterations // cfg.eval_every
    for name in ("config.txt", "densify.csv", "checkpoint.bin", "cameras.json", "manifest.json"):
        assert (tmp_path / "run" / name).exists()


def test_train_is_reproducible(workspace, tmp_path):
    root, _, _ = workspace
    run_train(root, tmp_path / "a", seed=3)
    run_train(root, tmp_path / "b", seed=3)
    assert metrics_without_wall_time(tmp_path / "a" / "metrics.csv") == \
        metrics_without_wall_time(tmp_path / "b" / "metrics.csv")
    for name in ("checkpoint.bin", "densify.csv", "config.txt", "manifest.json"):
        if name == "manifest.json":
            continue  # records the output path, which differs
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_render_matches_trainer_last_render(workspace, tmp_path):
    root, _, _ = workspace
    run_train(root, tmp_path / "run")
    out = tmp_path / "view0.npy"
    assert main(["render", "--checkpoint", str(tmp_path / "run" / "checkpoint.bin"), "--camera-index", "0",
                 "--out-image", str(out)]) == 0
    assert np.array_equal(np.load(out), np.load(tmp_path / "run" / "last_render.npy"))
    assert main(["render", "--checkpoint", str(tmp_path / "run" / "checkpoint.bin"), "--camera-index", "0",
                 "--out-image", str(tmp_path / "view0.png")]) == 0


def test_eval_after_training_beats_initialization(workspace, tmp_path):
    root, ds, cfg = workspace
    run_train(root, tmp_path / "run")
    rng = np.random.default_rng(cfg.seed)
    init = initialize(ds, cfg, rng)
    init.quantize_()
    state = TrainState(init, AdamState.for_scene(init), DensifyStats.zeros(init.n), 0, rng.bit_generator.state,
                       ViewOrder.start([1, 2], rng), cfg.to_text())
    save_checkpoint(tmp_path / "init.bin", state)
    before = eval_checkpoint(tmp_path / "init.bin", str(root / "data"))
    after = eval_checkpoint(tmp_path / "run" / "checkpoint.bin", str(root / "data"))
    assert after.psnr > before.psnr
    assert main(["eval", "--checkpoint", str(tmp_path / "run" / "checkpoint.bin"), "--dataset",
                 str(root / "data")]) == 0


def test_extent_command(capsys):
    assert main(["extent", "--dataset", "synthetic:clustered_cameras:0"]) == 0
    out = capsys.readouterr().out
    assert "ratio" in out and "45.45" in out


def test_report_and_ablate_commands(workspace, tmp_path):
    root, _, _ = workspace
    assert main(["ablate", "--dataset", str(root / "data"), "--config", str(root / "config.txt"),
                 "--variants", "ours", "baseline", "--workers", "1", "--out", str(tmp_path / "abl")]) == 0
    with open(tmp_path / "abl" / "ablation.csv") as fh:
        assert [r["variant"] for r in csv.DictReader(fh)] == ["ours", "baseline"]
    assert main(["report", str(tmp_path / "abl" / "ours" / "seed_0"), str(tmp_path / "abl" / "baseline" / "seed_0"),
                 "--out", str(tmp_path / "rep")]) == 0
    for name in ("gaussians.png", "psnr.png", "threshold.png", "summary.csv"):
        assert (tmp_path / "rep" / name).exists()


def test_synth_command(tmp_path):
    assert main(["synth", "--kind", "clustered_cameras", "--seed", "1", "--out", str(tmp_path / "d")]) == 0
    assert (tmp_path / "d" / "dataset.json").exists()


def test_contract_violation_exit_code(workspace, tmp_path, capsys):
    root, _, _ = workspace
    code = main(["train", "--dataset", str(root / "data"), "--config", str(root / "config.txt"),
                 "--iterations", "5", "--out", str(tmp_path / "bad")])
    assert code != 0
    assert "densify_until" in capsys.readouterr().err


def test_missing_dataset_exit_code(tmp_path, capsys):
    assert main(["extent", "--dataset", str(tmp_path / "nope")]) != 0
    assert "error" in capsys.readouterr().err


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "splatlab.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("train", "render", "eval", "extent", "ablate", "report", "synth"):
        assert cmd in proc.stdout
