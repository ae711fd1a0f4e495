"""Command-line entry point: ``leishseg {synth,train,predict,evaluate}``.

Every command takes ``--config FILE``, ``--preset NAME``, ``--out DIR`` and any
number of ``--key value`` overrides for keys of :data:`leishseg.config.SCHEMA`.
Output directories default to subfolders of ``$LEISHSEG_OUTPUT_ROOT`` (or
``./runs``).

Exit codes: 0 ok, 1 usage or configuration error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import math
import os
import sys
from pathlib import Path

import numpy as np

from .config import MODEL_KEYS, ConfigError, resolve, write_config_file
from .data import (DataError, LabeledImage, ManifestEntry, SamplerConfig, extract_patches, load_entry, load_image,
                   load_labelmap, plan_patch_grid, read_manifest, save_image, save_labelmap, write_manifest)
from .inference import predict_tiled
from .postprocess import SizeFilterParams, build_report, estimate_size_params
from .synth import InfeasibleSceneError, SynthParams, synth_generate
from .tensor import NonFiniteError
from .train import TrainConfig, train
from .unet import UNetConfig, argmax_labels, build_unet, load_checkpoint, save_checkpoint

ENV_OUTPUT_ROOT = "LEISHSEG_OUTPUT_ROOT"
SNAPSHOT = "config.resolved.txt"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def output_root() -> Path:
    return Path(os.environ.get(ENV_OUTPUT_ROOT) or "runs")


def _overrides(extra: list[str]) -> dict:
    """``--key value`` / ``--key=value`` pairs left over by argparse."""
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or tok == "--":
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"missing value for --{key}")
            value = extra[i + 1]
            i += 2
        out[key.replace("-", "_")] = value
    return out


def _setup(args, extra, default_sub: str):
    cfg, explicit = resolve(args.preset, args.config, _overrides(extra))
    out = Path(args.out) if args.out else output_root() / default_sub
    out.mkdir(parents=True, exist_ok=True)
    write_config_file(out / SNAPSHOT, cfg)
    return cfg, explicit, out


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# --------------------------------------------------------------------------
# synth
# --------------------------------------------------------------------------

def split_counts(n: int, n_train: int, n_val: int) -> tuple[int, int, int]:
    tr = min(n_train, n)
    va = min(n_val, n - tr)
    return tr, va, n - tr - va


def cmd_synth(args, extra) -> int:
    cfg, _, out = _setup(args, extra, "data")
    params = SynthParams(height=cfg["image_height"], width=cfg["image_width"], profile=cfg["profile"],
                         rosettes=cfg["rosettes"], noise=cfg["noise"], seed=cfg["seed"])
    n = cfg["n_images"]
    if n < 0:
        raise ConfigError("n_images must be >= 0")
    tr, va, _ = split_counts(n, cfg["n_train"], cfg["n_val"])
    (out / "images").mkdir(exist_ok=True)
    (out / "labels").mkdir(exist_ok=True)
    entries = []
    for i, im in enumerate(synth_generate(params, n)):
        split = "train" if i < tr else "val" if i < tr + va else "test"
        rgb_rel, lab_rel = f"images/{im.id}.png", f"labels/{im.id}.png"
        save_image(out / rgb_rel, im.rgb)
        save_labelmap(out / lab_rel, im.labels)
        entries.append(ManifestEntry(im.id, rgb_rel, lab_rel, split))
    write_manifest(out / "manifest.csv", entries)
    _log(f"wrote {n} images to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------

LOG_HEADER = ("epoch", "train_loss", "val_loss")


def _load_split(data: Path, split: str) -> list[LabeledImage]:
    entries = read_manifest(data / "manifest.csv")
    if split == "all":
        return [load_entry(e, data) for e in entries]
    return [load_entry(e, data) for e in entries if e.split == split]


def _model_config(cfg) -> UNetConfig:
    return UNetConfig(depth=cfg["depth"], base_filters=cfg["base_filters"], seed=cfg["seed"], dtype=cfg["dtype"])


def _patches(images, cfg):
    out = []
    for im in images:
        grid = plan_patch_grid(*im.shape, cfg["patch_size"], cfg["stride"])
        out += extract_patches(im, grid)
    return out


def _check_patch_size(cfg, depth) -> None:
    if cfg["patch_size"] % (2 ** depth):
        raise ConfigError(f"patch_size {cfg['patch_size']} is not divisible by 2**depth = {2 ** depth}")


def _model_mismatch(cfg, explicit, ckpt_cfg: UNetConfig) -> list[str]:
    diffs = []
    for key in MODEL_KEYS:
        have = getattr(ckpt_cfg, key)
        if key in explicit and cfg[key] != have:
            diffs.append(f"{key}: config {cfg[key]!r} vs checkpoint {have!r}")
    return diffs


def _read_log(path: Path, before_epoch: int) -> list[tuple[int, float, float]]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        rows = [(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"])) for r in csv.DictReader(fh)]
    return [r for r in rows if r[0] < before_epoch]


def _write_log(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for e, tr, va in rows:
            w.writerow([e, repr(tr), repr(va)])


def cmd_train(args, extra) -> int:
    cfg, explicit, out = _setup(args, extra, "train")
    data = Path(args.data) if args.data else output_root() / "data"
    train_images = _load_split(data, "train")
    val_images = _load_split(data, "val")
    if not train_images:
        raise DataError(f"{data / 'manifest.csv'}: no training images")
    sampler = SamplerConfig(cfg["stage1_epochs"], cfg["stage2_epochs"], cfg["parasite_threshold"],
                            threshold_mode=cfg["threshold_mode"], seed=cfg["seed"])
    tcfg = TrainConfig(lr=cfg["lr"], batch_size=cfg["batch_size"], beta1=cfg["beta1"], beta2=cfg["beta2"],
                       eps=cfg["adam_eps"], augment=cfg["augment"], strict=cfg["strict"], sampler=sampler)

    log_path, last_path, best_path = out / "loss_log.csv", out / "last.npz", out / "best.npz"
    if args.resume:
        if not last_path.exists():
            raise DataError(f"cannot resume: {last_path} not found")
        params, meta = load_checkpoint(last_path)
        diffs = _model_mismatch(cfg, explicit, params.config)
        if diffs:
            raise ConfigError("config does not match checkpoint: " + "; ".join(diffs))
        start = int(meta["epoch"]) + 1
        best_val = math.inf if meta.get("best") is None else float(meta["best"])
        history = _read_log(log_path, start)
    else:
        params = build_unet(_model_config(cfg))
        start, best_val, history = 0, math.inf, []
        save_checkpoint(best_path, params, {"epoch": -1, "best": None})
        save_checkpoint(last_path, params, {"epoch": -1, "best": None})
    _check_patch_size(cfg, params.config.depth)
    _write_log(log_path, history)

    train_patches, val_patches = _patches(train_images, cfg), _patches(val_images, cfg)
    _log(f"{len(train_patches)} training patches, {len(val_patches)} validation patches; "
         f"epochs {start}..{sampler.total_epochs - 1}")

    state = {"best": best_val}

    def on_epoch_end(epoch, tr, va):
        history.append((epoch, tr, va))
        _write_log(log_path, history)
        score = va if val_patches else tr
        if score < state["best"]:
            state["best"] = score
            save_checkpoint(best_path, params, {"epoch": epoch, "best": score})
        save_checkpoint(last_path, params, {"epoch": epoch, "best": state["best"]})
        _log(f"epoch {epoch}: train {tr:.5f} val {va:.5f}")

    train(params, train_patches, val_patches, tcfg, start_epoch=start, on_epoch_end=on_epoch_end)
    return EXIT_OK


# --------------------------------------------------------------------------
# predict
# --------------------------------------------------------------------------

def _predict_inputs(args, cfg) -> list[tuple[str, Path]]:
    if args.images:
        return [(Path(p).stem, Path(p)) for p in args.images]
    data = Path(args.data) if args.data else output_root() / "data"
    split = cfg["eval_split"]
    entries = read_manifest(data / "manifest.csv")
    return [(e.id, data / e.rgb) for e in entries if split == "all" or e.split == split]


def cmd_predict(args, extra) -> int:
    cfg, explicit, out = _setup(args, extra, "pred")
    ckpt = Path(args.checkpoint) if args.checkpoint else output_root() / "train" / "best.npz"
    if not ckpt.exists():
        raise DataError(f"checkpoint {ckpt} not found")
    params, _ = load_checkpoint(ckpt)
    diffs = _model_mismatch(cfg, explicit, params.config)
    if diffs:
        raise ConfigError("config does not match checkpoint: " + "; ".join(diffs))
    _check_patch_size(cfg, params.config.depth)
    for image_id, path in _predict_inputs(args, cfg):
        rgb = load_image(path)
        probs = predict_tiled(params, rgb, cfg["patch_size"], cfg["stride"], cfg["batch_size"])
        save_labelmap(out / f"{image_id}.png", argmax_labels(probs))
        if cfg["save_probs"]:
            np.save(out / f"{image_id}_probs.npy", probs)
    return EXIT_OK


# --------------------------------------------------------------------------
# evaluate
# --------------------------------------------------------------------------

def cmd_evaluate(args, extra) -> int:
    cfg, _, out = _setup(args, extra, "eval")
    data = Path(args.data) if args.data else output_root() / "data"
    pred_dir = Path(args.pred) if args.pred else output_root() / "pred"
    entries = read_manifest(data / "manifest.csv")
    split = cfg["eval_split"]
    evaluated = [e for e in entries if split == "all" or e.split == split]
    missing = [str(pred_dir / f"{e.id}.png") for e in evaluated if not (pred_dir / f"{e.id}.png").exists()]
    if missing:
        raise DataError(f"{len(missing)} prediction(s) missing:\n  " + "\n  ".join(missing))
    if not evaluated:
        raise DataError(f"no images in split {split!r}")
    gts = [load_labelmap(data / e.labels) for e in evaluated]
    preds = [load_labelmap(pred_dir / f"{e.id}.png") for e in evaluated]

    train_gt = [load_labelmap(data / e.labels) for e in entries if e.split == "train"]
    filt: SizeFilterParams | None = None
    notes = []
    if train_gt:
        filt = estimate_size_params(train_gt, cfg["size_k"], connectivity=cfg["connectivity"])
    else:
        notes.append("no training ground truth: parasite counts are not size-filtered")
    report = build_report(preds, gts, filt, ids=[e.id for e in evaluated],
                          thresholds=cfg["j_thresholds"], connectivity=cfg["connectivity"])
    report.notes += notes
    (out / "pixel_metrics.csv").write_text(report.pixel_csv())
    (out / "detection.csv").write_text(report.detection_csv())
    (out / "counts.csv").write_text(report.counts_csv())
    (out / "report.txt").write_text(report.render())
    print(report.render(), end="")
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="leishseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--preset", help="named preset applied before the config file (full, desk)")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("synth", help="generate a synthetic labelled dataset")
    common(p)
    p = sub.add_parser("train", help="train a U-Net on a dataset manifest")
    common(p)
    p.add_argument("--data", help="dataset directory holding manifest.csv")
    p.add_argument("--resume", action="store_true", help="continue from last.npz in the output directory")
    p = sub.add_parser("predict", help="write label maps for images")
    common(p)
    p.add_argument("--checkpoint", help="model checkpoint (.npz)")
    p.add_argument("--data", help="dataset directory; predicts the eval_split images")
    p.add_argument("--images", nargs="+", help="image files (instead of --data)")
    p = sub.add_parser("evaluate", help="score predicted label maps against ground truth")
    common(p)
    p.add_argument("--pred", help="directory of predicted <id>.png label maps")
    p.add_argument("--data", help="dataset directory holding manifest.csv")
    return parser


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "predict": cmd_predict, "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        return COMMANDS[args.command](args, extra)
    except ConfigError as exc:
        _log(f"error: {exc}")
        return EXIT_CONFIG
    except (NonFiniteError, FloatingPointError) as exc:
        _log(f"numeric failure: {exc}")
        return EXIT_NUMERIC
    except (DataError, InfeasibleSceneError, FileNotFoundError, OSError) as exc:
        _log(f"data error: {exc}")
        return EXIT_DATA
    except ValueError as exc:   # remaining parameter validation, e.g. ShapeError
        _log(f"error: {exc}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
