"""Patch tiling, two-stage patch sampling, augmentation, encoding and image I/O."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .classes import NUM_CLASSES, PARASITE_CLASSES


class DataError(ValueError):
    """Malformed or inconsistent image/label data."""


@dataclass
class LabeledImage:
    rgb: np.ndarray      # 3 x H x W in [0, 1]
    labels: np.ndarray   # H x W uint8 in 0..6
    id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rgb.ndim != 3 or self.rgb.shape[0] != 3:
            raise DataError(f"rgb must be 3 x H x W, got {self.rgb.shape}")
        if self.labels.shape != self.rgb.shape[1:]:
            raise DataError(f"label map {self.labels.shape} does not match image {self.rgb.shape[1:]}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


# --------------------------------------------------------------------------
# tiling
# --------------------------------------------------------------------------

@dataclass
class PatchGrid:
    patch_size: int
    stride: int
    origins: list[tuple[int, int]]
    height: int = 0
    width: int = 0

    def __len__(self) -> int:
        return len(self.origins)


def _axis_origins(dim: int, patch: int, stride: int) -> list[int]:
    starts = list(range(0, dim - patch + 1, stride))
    if starts[-1] != dim - patch:
        starts.append(dim - patch)
    return starts


def plan_patch_grid(height: int, width: int, patch_size: int = 224, stride: int = 112) -> PatchGrid:
    """Row-major patch origins at the given stride, plus a flush patch on each
    far border when the image does not divide evenly."""
    if patch_size > min(height, width):
        raise DataError(f"patch size {patch_size} larger than image {height}x{width}")
    if not 1 <= stride <= patch_size:
        raise DataError(f"stride must lie in 1..{patch_size} so patches tile the image, got {stride}")
    rows = _axis_origins(height, patch_size, stride)
    cols = _axis_origins(width, patch_size, stride)
    return PatchGrid(patch_size, stride, [(r, c) for r in rows for c in cols], height, width)


@dataclass
class Patch:
    rgb: np.ndarray
    labels: np.ndarray
    image_id: str
    origin: tuple[int, int]

    @property
    def key(self) -> tuple[str, tuple[int, int]]:
        return self.image_id, self.origin


def extract_patches(image: LabeledImage, grid: PatchGrid) -> list[Patch]:
    p = grid.patch_size
    return [
        Patch(image.rgb[:, r:r + p, c:c + p], image.labels[r:r + p, c:c + p], image.id, (r, c))
        for r, c in grid.origins
    ]


def stitch_predictions(patch_probs, grid: PatchGrid, height: int, width: int) -> np.ndarray:
    """Average overlapping patch probabilities into a C x H x W map.

    ``patch_probs`` is a sequence aligned with ``grid.origins`` or a mapping
    from origin to a C x P x P array.
    """
    if isinstance(patch_probs, dict):
        missing = [o for o in grid.origins if o not in patch_probs]
        if missing:
            raise DataError(f"missing predictions for patches at {missing}")
        patch_probs = [patch_probs[o] for o in grid.origins]
    if len(patch_probs) != len(grid.origins) or any(pp is None for pp in patch_probs):
        raise DataError(f"expected {len(grid.origins)} patch predictions, got {len(patch_probs)}")
    c = patch_probs[0].shape[0]
    p = grid.patch_size
    acc = np.zeros((c, height, width), dtype=np.float64)
    cover = np.zeros((height, width), dtype=np.int64)
    for (r, col), probs in zip(grid.origins, patch_probs):
        acc[:, r:r + p, col:col + p] += probs
        cover[r:r + p, col:col + p] += 1
    if cover.min() < 1:
        raise DataError("patch grid leaves pixels uncovered")
    return acc / cover


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------

@dataclass
class SamplerConfig:
    stage1_epochs: int = 40
    stage2_epochs: int = 200
    parasite_fraction_threshold: float = 0.40
    parasite_classes: tuple[int, ...] = PARASITE_CLASSES
    threshold_mode: str = "sum"   # "sum" of parasite classes, or "any" single class
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.parasite_fraction_threshold <= 1.0:
            raise ValueError("parasite_fraction_threshold must lie in [0, 1]")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ValueError("stage epoch counts must be >= 0")
        if self.threshold_mode not in ("sum", "any"):
            raise ValueError(f"unknown threshold_mode {self.threshold_mode!r}")

    @property
    def total_epochs(self) -> int:
        return self.stage1_epochs + self.stage2_epochs


def parasite_fraction(labels: np.ndarray, classes: Sequence[int] = PARASITE_CLASSES,
                      mode: str = "sum") -> float:
    """Share of pixels labelled with a parasite class.

    ``mode="sum"`` pools the classes; ``mode="any"`` returns the largest single
    class share.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0.0
    shares = [np.count_nonzero(labels == c) / labels.size for c in classes]
    return float(sum(shares)) if mode == "sum" else float(max(shares))


class EmptyStageError(DataError):
    pass


def stage1_pool(patches: Sequence[Patch], config: SamplerConfig) -> list[int]:
    return [
        i for i, p in enumerate(patches)
        if parasite_fraction(p.labels, config.parasite_classes, config.threshold_mode)
        >= config.parasite_fraction_threshold
    ]


def sample_epoch(patches: Sequence[Patch], epoch_index: int, config: SamplerConfig,
                 rng: np.random.Generator, pool: list[int] | None = None) -> list[Patch]:
    """Patch order for one epoch.

    Epochs before ``stage1_epochs`` shuffle only the parasite-rich patches;
    later epochs shuffle every patch. Each patch appears once per epoch.
    ``pool`` may carry precomputed stage-1 indices.
    """
    if not patches:
        raise DataError("no patches to sample from")
    if epoch_index < config.stage1_epochs:
        idx = stage1_pool(patches, config) if pool is None else pool
        if not idx:
            raise EmptyStageError(
                f"no patch reaches parasite fraction {config.parasite_fraction_threshold:.2f}; "
                "lower parasite_fraction_threshold or use a parasite-denser dataset")
    else:
        idx = range(len(patches))
    idx = np.array(idx)
    return [patches[i] for i in rng.permutation(idx)]


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    """Independent stream per epoch so training can resume mid-run."""
    return np.random.default_rng([seed, epoch])


# --------------------------------------------------------------------------
# augmentation: the 8 symmetries of the square
# --------------------------------------------------------------------------

def _rot(k):
    return lambda a: np.rot90(a, k, axes=(-2, -1))


AUGMENTATIONS = {
    "identity": lambda a: a,
    "rot90": _rot(1),
    "rot180": _rot(2),
    "rot270": _rot(3),
    "hflip": lambda a: np.flip(a, axis=-1),
    "vflip": lambda a: np.flip(a, axis=-2),
    "transpose": lambda a: np.swapaxes(a, -1, -2),
    "antitranspose": lambda a: np.rot90(np.swapaxes(a, -1, -2), 2, axes=(-2, -1)),
}
_NEEDS_SQUARE = {"rot90", "rot270", "transpose", "antitranspose"}


def augment_arrays(rgb: np.ndarray, labels: np.ndarray, op: str):
    if op not in AUGMENTATIONS:
        raise ValueError(f"unknown augmentation {op!r}")
    if op in _NEEDS_SQUARE and labels.shape[-1] != labels.shape[-2]:
        raise DataError(f"{op} needs a square patch, got {labels.shape}")
    f = AUGMENTATIONS[op]
    return np.ascontiguousarray(f(rgb)), np.ascontiguousarray(f(labels))


def augment(item, op: str):
    """Apply one dihedral symmetry to image and labels together."""
    rgb, labels = augment_arrays(item.rgb, item.labels, op)
    if isinstance(item, Patch):
        return Patch(rgb, labels, item.image_id, item.origin)
    return LabeledImage(rgb, labels, item.id, dict(item.meta))


def random_augmentation(rng: np.random.Generator) -> str:
    names = list(AUGMENTATIONS)
    return names[int(rng.integers(len(names)))]


# --------------------------------------------------------------------------
# encoding
# --------------------------------------------------------------------------

def one_hot(labels: np.ndarray, num_classes: int = NUM_CLASSES, dtype=np.float64) -> np.ndarray:
    """... x H x W integer labels -> ... x C x H x W indicator array."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"labels must lie in [0, {num_classes}), found {labels.min()}..{labels.max()}")
    eye = np.eye(num_classes, dtype=dtype)
    return np.moveaxis(eye[labels], -1, -3)


# --------------------------------------------------------------------------
# files
# --------------------------------------------------------------------------

def load_image(path) -> np.ndarray:
    """8-bit RGB image file -> 3 x H x W float64 in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: cannot read image ({exc})") from exc
    return arr.transpose(2, 0, 1) / 255.0


def save_image(path, rgb: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(Path(path))


def save_labelmap(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise DataError(f"label map must be 2-d, got {labels.shape}")
    if labels.min() < 0 or labels.max() >= NUM_CLASSES:
        raise DataError(f"label values must lie in 0..{NUM_CLASSES - 1}")
    Image.fromarray(labels.astype(np.uint8), mode="L").save(Path(path))


def load_labelmap(path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P"):
                raise DataError(f"{path}: label map must be single-channel 8-bit, got mode {im.mode}")
            arr = np.asarray(im, dtype=np.uint8).copy()
    except OSError as exc:
        raise DataError(f"{path}: cannot read label map ({exc})") from exc
    bad = np.argwhere(arr >= NUM_CLASSES)
    if bad.size:
        r, c = bad[0]
        raise DataError(f"{path}: label value {arr[r, c]} at row {r}, col {c} "
                        f"(valid 0..{NUM_CLASSES - 1}; {len(bad)} bad pixels)")
    return arr


MANIFEST_FIELDS = ("id", "rgb", "labels", "split")


@dataclass
class ManifestEntry:
    id: str
    rgb: str
    labels: str
    split: str


def write_manifest(path, entries: Sequence[ManifestEntry]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for e in entries:
            w.writerow([e.id, e.rgb, e.labels, e.split])


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise DataError(f"{path}: manifest header must be {','.join(MANIFEST_FIELDS)}")
        return [ManifestEntry(**row) for row in reader]


def load_entry(entry: ManifestEntry, root) -> LabeledImage:
    root = Path(root)
    return LabeledImage(load_image(root / entry.rgb), load_labelmap(root / entry.labels), entry.id)
