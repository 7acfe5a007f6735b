import filecmp
import os

import numpy as np
import pytest

from tokensplat.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, main
from tokensplat.serialization import (load_dataset, save_gaussian_checkpoint,
                                      read_ppm)

SMALL = ["--set", "scene.image_size=16", "--set", "scene.n_views=6",
         "--set", "scene.n_static_blobs=1"]
TINY_NET = ["--set", "network.channels=16", "--set", "network.heads=2",
            "--set", "network.enc_depth=1", "--set", "network.dec_depth=1",
            "--set", "network.n_static=1", "--set", "network.d_time=8"]
TINY_TRAIN = ["--set", "train.total_steps=3", "--set", "train.warmup_steps=1",
              "--set", "train.batch_size=1", "--set", "train.n_context=2",
              "--set", "train.n_target=1", "--set", "train.log_interval=1"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth", "--out", str(out), "--seed", "7"] + SMALL) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def run_dir(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    args = (["train", "--data", str(data_dir), "--out", str(out)]
            + TINY_NET + TINY_TRAIN)
    assert main(args) == EXIT_OK
    return out


def _dir_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files:
        return False
    return all(_dir_equal(os.path.join(a, d), os.path.join(b, d))
               for d in cmp.common_dirs)


def test_synth_deterministic(tmp_path):
    d1, d2 = tmp_path / "d1", tmp_path / "d2"
    for d in (d1, d2):
        assert main(["synth", "--out", str(d), "--seed", "7"] + SMALL) == EXIT_OK
    assert _dir_equal(d1, d2)


def test_eval_oracle_psnr_capped(data_dir, capsys):
    assert main(["eval", "--data", str(data_dir), "--oracle"]) == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "scene,t_index,view,psnr,ssim"
    for row in lines[1:]:
        assert float(row.split(",")[3]) == 100.0


def test_eval_requires_source(data_dir):
    assert main(["eval", "--data", str(data_dir)]) == EXIT_CONFIG


def test_train_outputs(run_dir):
    assert (run_dir / "model.ckpt").exists()
    header = (run_dir / "metrics.csv").read_text().splitlines()[0]
    assert header == "step,lr,mse,ssim_loss,vis_loss,total,psnr"


def test_eval_model_checkpoint(data_dir, run_dir, tmp_path):
    out = tmp_path / "eval.csv"
    args = ["eval", "--data", str(data_dir), "--ckpt", str(run_dir / "model.ckpt"),
            "--out", str(out), "--set", "train.n_context=2",
            "--set", "train.n_target=1"]
    assert main(args) == EXIT_OK
    assert out.read_text().splitlines()[-1].startswith("mean,")


def test_render_writes_images(data_dir, run_dir, tmp_path):
    out = tmp_path / "renders"
    args = ["render", "--ckpt", str(run_dir / "model.ckpt"), "--data", str(data_dir),
            "--views", "1,3", "--out", str(out),
            "--set", "train.n_context=2", "--set", "train.n_target=1"]
    assert main(args) == EXIT_OK
    img = read_ppm(out / "view_001.ppm")
    assert img.shape == (16, 16, 3)


def test_export_ply_from_gaussian_checkpoint(data_dir, tmp_path):
    from tokensplat.gaussians import activate
    samples, _ = load_dataset(data_dir)
    ck = tmp_path / "gt.ckpt"
    save_gaussian_checkpoint(ck, samples[0].gt_set(0))
    out = tmp_path / "out.ply"
    assert main(["export-ply", "--ckpt", str(ck), "--out", str(out)]) == EXIT_OK
    assert out.read_bytes().startswith(b"ply\n")


def test_tune_gaussians_subcommand(data_dir, run_dir, tmp_path):
    out = tmp_path / "tuned"
    args = ["tune", "--ckpt", str(run_dir / "model.ckpt"), "--data", str(data_dir),
            "--out", str(out), "--set", "tune.steps=2",
            "--set", "tune.target=gaussians",
            "--set", "train.n_context=2", "--set", "train.n_target=1"]
    assert main(args) == EXIT_OK
    assert (out / "tuned.ckpt").exists()
    assert (out / "tune.csv").read_text().startswith("step,input_psnr")


def test_unknown_config_key_exit_code(tmp_path):
    args = ["synth", "--out", str(tmp_path / "x"), "--set", "bogus.key=1"]
    assert main(args) == EXIT_CONFIG


def test_missing_dataset_exit_code(tmp_path):
    args = ["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]
    assert main(args) == EXIT_IO


def test_config_reference_flag(capsys):
    assert main(["--config-reference"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "train.lr_max" in out and "network.channels" in out


def test_no_subcommand_is_config_error(capsys):
    assert main([]) == EXIT_CONFIG
    capsys.readouterr()


def test_flow_static_model_numeric_error(data_dir, run_dir, tmp_path, capsys):
    # static-only checkpoint: flow must fail with a clear nonzero exit
    args = ["flow", "--ckpt", str(run_dir / "model.ckpt"), "--data", str(data_dir),
            "--timestamps", "0,1", "--out", str(tmp_path / "f.csv"),
            "--set", "train.n_context=2", "--set", "train.n_target=1"]
    code = main(args)
    assert code != EXIT_OK
    capsys.readouterr()
