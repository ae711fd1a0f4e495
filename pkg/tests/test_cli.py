import shutil

import numpy as np
import pytest

from leishseg.cli import SNAPSHOT, main, split_counts
from leishseg.config import ConfigError, PRESETS, SCHEMA, read_config_file, resolve
from leishseg.data import load_labelmap, plan_patch_grid, read_manifest, save_image, save_labelmap
from leishseg.inference import predict_tiled
from leishseg.postprocess import parse_csv
from leishseg.unet import UNetConfig, build_unet, load_checkpoint, predict_proba

SMALL = ["--image_height", "64", "--image_width", "64", "--profile", "dense", "--rosettes", "true",
         "--n_images", "5", "--n_train", "3", "--n_val", "1"]
TINY_MODEL = ["--depth", "1", "--base_filters", "2", "--patch_size", "32", "--stride", "32",
              "--stage1_epochs", "1", "--parasite_threshold", "0.1", "--batch_size", "4", "--lr", "1e-3"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["synth", "--out", str(out), *SMALL]) == 0
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--data", str(dataset), "--out", str(out), *TINY_MODEL, "--stage2_epochs", "1"]) == 0
    return out


def _files(d):
    return {p.relative_to(d): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


# ------------------------------------------------------------------ config

def test_precedence_flags_over_file_over_preset(tmp_path):
    f = tmp_path / "c.txt"
    f.write_text("preset = desk\nlr = 0.5  # comment\nbatch_size = 7\n")
    cfg, explicit = resolve(None, f, {"batch_size": "9"})
    assert cfg["batch_size"] == 9
    assert cfg["lr"] == 0.5
    assert cfg["patch_size"] == PRESETS["desk"]["patch_size"]
    assert cfg["connectivity"] == SCHEMA["connectivity"][1]
    assert {"batch_size", "lr", "patch_size"} <= explicit and "connectivity" not in explicit


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        resolve(overrides={"nope": "1"})
    with pytest.raises(ConfigError):
        resolve(overrides={"lr": "fast"})
    with pytest.raises(ConfigError):
        resolve(preset="huge")
    bad = tmp_path / "b.txt"
    bad.write_text("lr 3\n")
    with pytest.raises(ConfigError, match="b.txt:1"):
        read_config_file(bad)


def test_split_counts_clamped():
    assert split_counts(45, 37, 4) == (37, 4, 4)
    assert split_counts(5, 37, 4) == (5, 0, 0)
    assert split_counts(0, 37, 4) == (0, 0, 0)


def test_usage_errors_exit_1(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--unknown_key", "3"]) == 1
    assert main(["synth", "--out", str(tmp_path), "--n_images"]) == 1
    assert main(["frobnicate"]) == 1
    assert "error" in capsys.readouterr().err


# ------------------------------------------------------------------- synth

def test_synth_zero_images(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--n_images", "0"]) == 0
    assert read_manifest(tmp_path / "manifest.csv") == []


def test_synth_splits_and_snapshot(dataset):
    entries = read_manifest(dataset / "manifest.csv")
    assert [e.split for e in entries] == ["train"] * 3 + ["val"] + ["test"]
    snap = read_config_file(dataset / SNAPSHOT)
    assert snap["n_images"] == 5 and snap["image_height"] == 64


def test_synth_deterministic(dataset, tmp_path):
    assert main(["synth", "--out", str(tmp_path), *SMALL]) == 0
    assert _files(tmp_path) == _files(dataset)


def test_synth_infeasible_exit_2(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--image_height", "16", "--image_width", "16",
                 "--profile", "dense", "--n_images", "1"]) == 2


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("LEISHSEG_OUTPUT_ROOT", str(tmp_path / "root"))
    assert main(["synth", "--n_images", "0"]) == 0
    assert (tmp_path / "root" / "data" / "manifest.csv").exists()


# ------------------------------------------------------------------- train

def test_train_zero_epochs(dataset, tmp_path):
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path), *TINY_MODEL,
                 "--stage1_epochs", "0", "--stage2_epochs", "0"]) == 0
    assert (tmp_path / "loss_log.csv").read_text() == "epoch,train_loss,val_loss\n"
    params, meta = load_checkpoint(tmp_path / "best.npz")
    assert meta["epoch"] == -1
    fresh = build_unet(UNetConfig(1, 2, seed=0))
    assert all(np.array_equal(a.value, b.value) for (_, a), (_, b) in zip(params.tensors(), fresh.tensors()))


def test_train_outputs(trained):
    rows = parse_csv((trained / "loss_log.csv").read_text())
    assert [r["epoch"] for r in rows] == ["0", "1"]
    assert (trained / "best.npz").exists() and (trained / "last.npz").exists()
    assert read_config_file(trained / SNAPSHOT)["depth"] == 1


def test_train_resume_continues_log(dataset, trained, tmp_path):
    shutil.copytree(trained, tmp_path / "t")
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path / "t"), *TINY_MODEL,
                 "--stage2_epochs", "2", "--resume"]) == 0
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path / "u"), *TINY_MODEL,
                 "--stage2_epochs", "2"]) == 0
    a = parse_csv((tmp_path / "t" / "loss_log.csv").read_text())
    b = parse_csv((tmp_path / "u" / "loss_log.csv").read_text())
    assert [r["epoch"] for r in a] == [r["epoch"] for r in b] == ["0", "1", "2"]
    for ra, rb in zip(a, b):
        assert abs(float(ra["train_loss"]) - float(rb["train_loss"])) <= 1e-12


def test_train_resume_mismatch_rejected(dataset, trained, tmp_path, capsys):
    shutil.copytree(trained, tmp_path / "t")
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path / "t"), *TINY_MODEL,
                 "--base_filters", "4", "--resume"]) == 1
    assert "base_filters" in capsys.readouterr().err


def test_train_missing_data_exit_2(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 2


def test_train_empty_stage1_exit_2(dataset, tmp_path, capsys):
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path), *TINY_MODEL,
                 "--parasite_threshold", "1.0"]) == 2
    assert "threshold" in capsys.readouterr().err


# ----------------------------------------------------------------- predict

def test_predict_writes_label_maps(dataset, trained, tmp_path):
    def run(out):
        return main(["predict", "--data", str(dataset), "--checkpoint", str(trained / "best.npz"),
                     "--out", str(out), *TINY_MODEL, "--save_probs", "true"])
    assert run(tmp_path / "p") == 0
    assert load_labelmap(tmp_path / "p" / "img004.png").shape == (64, 64)
    probs = np.load(tmp_path / "p" / "img004_probs.npy")
    np.testing.assert_allclose(probs.sum(axis=0), 1.0, atol=1e-12)
    assert run(tmp_path / "q") == 0
    assert _files(tmp_path / "p") == _files(tmp_path / "q")


def test_predict_mismatch_names_fields(trained, tmp_path, capsys):
    img = tmp_path / "x.png"
    save_image(img, np.zeros((3, 32, 32)))
    assert main(["predict", "--checkpoint", str(trained / "best.npz"), "--images", str(img),
                 "--out", str(tmp_path / "o"), "--depth", "3", "--base_filters", "2"]) == 1
    err = capsys.readouterr().err
    assert "depth" in err and "base_filters" not in err


def test_predict_missing_checkpoint_exit_2(tmp_path):
    assert main(["predict", "--checkpoint", str(tmp_path / "none.npz"), "--out", str(tmp_path)]) == 2


def test_single_patch_path_is_one_forward():
    params = build_unet(UNetConfig(1, 2, seed=2))
    rgb = np.random.default_rng(0).random((3, 224, 224))
    assert np.array_equal(predict_tiled(params, rgb, 224, 112), predict_proba(params, rgb))


def test_stitched_448_matches_full_forward_in_constant_regions():
    params = build_unet(UNetConfig(1, 2, seed=2))
    rgb = np.full((3, 448, 448), 0.6)
    tiled = predict_tiled(params, rgb, 224, 112)
    full = predict_proba(params, rgb)
    grid = plan_patch_grid(448, 448, 224, 112)
    assert len(grid) == 9
    margin = 16   # beyond the depth-1 receptive field
    inner = np.ones((448, 448), bool)
    for r, c in grid.origins:
        covered = np.zeros((448, 448), bool)
        covered[r:r + 224, c:c + 224] = True
        interior = np.zeros((448, 448), bool)
        interior[r + margin:r + 224 - margin, c + margin:c + 224 - margin] = True
        inner &= ~covered | interior
    assert inner.sum() > 0
    np.testing.assert_allclose(tiled[:, inner], full[:, inner], rtol=0, atol=1e-12)


# ---------------------------------------------------------------- evaluate

def _gt_as_pred(dataset, dst, transform=lambda a: a):
    dst.mkdir()
    for e in read_manifest(dataset / "manifest.csv"):
        lab = load_labelmap(dataset / e.labels)
        save_labelmap(dst / f"{e.id}.png", transform(lab))


def test_evaluate_perfect_predictions(dataset, tmp_path, capsys):
    _gt_as_pred(dataset, tmp_path / "p")
    assert main(["evaluate", "--data", str(dataset), "--pred", str(tmp_path / "p"),
                 "--out", str(tmp_path / "e"), "--eval_split", "all"]) == 0
    pix = parse_csv((tmp_path / "e" / "pixel_metrics.csv").read_text())
    assert all(float(r[k]) == 1.0 for r in pix for k in ("dice", "precision", "recall", "f1"))
    det = parse_csv((tmp_path / "e" / "detection.csv").read_text())
    assert det and all(float(r[k]) == 1.0 for r in det for k in ("j25", "j50", "j75", "mean_j"))
    assert (tmp_path / "e" / "report.txt").read_text() == capsys.readouterr().out


def test_evaluate_empty_predictions(dataset, tmp_path):
    _gt_as_pred(dataset, tmp_path / "p", np.zeros_like)
    assert main(["evaluate", "--data", str(dataset), "--pred", str(tmp_path / "p"),
                 "--out", str(tmp_path / "e")]) == 0
    pix = {r["class"]: r for r in parse_csv((tmp_path / "e" / "pixel_metrics.csv").read_text())}
    for name in ("promastigote", "adhered", "amastigote"):
        assert float(pix[name]["recall"]) == 0.0
    det = parse_csv((tmp_path / "e" / "detection.csv").read_text())
    assert all(float(r["j25"]) == 0.0 for r in det)


def test_evaluate_lists_all_missing(dataset, tmp_path, capsys):
    _gt_as_pred(dataset, tmp_path / "p")
    for i in (0, 2):
        (tmp_path / "p" / f"img00{i}.png").unlink()
    assert main(["evaluate", "--data", str(dataset), "--pred", str(tmp_path / "p"),
                 "--out", str(tmp_path / "e"), "--eval_split", "all"]) == 2
    err = capsys.readouterr().err
    assert "img000.png" in err and "img002.png" in err and "2 prediction(s) missing" in err


def test_desk_smoke_run_improves(tmp_path):
    data, out = tmp_path / "d", tmp_path / "t"
    assert main(["synth", "--preset", "desk", "--out", str(data), "--n_images", "8", "--n_train", "8",
                 "--n_val", "0"]) == 0
    assert main(["train", "--preset", "desk", "--data", str(data), "--out", str(out)]) == 0
    rows = parse_csv((out / "loss_log.csv").read_text())
    assert len(rows) == 60
    assert float(rows[-1]["train_loss"]) < float(rows[0]["train_loss"])
