"""Connected components, size filtering, parasite counting and the
pixel/region evaluation report."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .classes import CLASS_NAMES, EVALUATED_CLASSES, PARASITE_CLASSES, UNKNOWN
from .losses import ConfusionCounts, confusion_from_maps, dice_score, precision_recall_f1

DEFAULT_THRESHOLDS = (0.25, 0.5, 0.75)

_STRUCTURE = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


@dataclass
class Region:
    class_id: int | None
    coords: np.ndarray          # k x 2 array of (row, col), row-major order

    @property
    def area(self) -> int:
        return len(self.coords)

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        r, c = self.coords[:, 0], self.coords[:, 1]
        return int(r.min()), int(c.min()), int(r.max()), int(c.max())

    @property
    def pixels(self) -> frozenset:
        return frozenset(map(tuple, self.coords.tolist()))

    def mask(self, shape) -> np.ndarray:
        m = np.zeros(shape, dtype=bool)
        m[self.coords[:, 0], self.coords[:, 1]] = True
        return m


def label_components(mask: np.ndarray, connectivity: int = 8) -> tuple[np.ndarray, int]:
    """Integer component map (0 = background) in raster order of first pixel."""
    if connectivity not in _STRUCTURE:
        raise ValueError("connectivity must be 4 or 8")
    lab, n = ndimage.label(np.asarray(mask, bool), structure=_STRUCTURE[connectivity])
    return lab, n


def connected_components(mask: np.ndarray, connectivity: int = 8,
                         class_id: int | None = None) -> list[Region]:
    """Maximal connected foreground sets, ordered by (min row, min col) of their bounding box."""
    lab, n = label_components(mask, connectivity)
    if n == 0:
        return []
    rows, cols = np.nonzero(lab)
    ids = lab[rows, cols]
    order = np.argsort(ids, kind="stable")
    bounds = np.searchsorted(ids[order], np.arange(1, n + 2))
    regions = []
    for k in range(n):
        sel = order[bounds[k]:bounds[k + 1]]
        regions.append(Region(class_id, np.stack([rows[sel], cols[sel]], axis=1)))
    # ndimage numbers components by first pixel in raster order; re-sort by bbox corner
    regions.sort(key=lambda reg: (reg.bbox[0], reg.bbox[1]))
    return regions


def class_regions(labelmap: np.ndarray, classes=PARASITE_CLASSES, connectivity: int = 8) -> dict[int, list[Region]]:
    return {c: connected_components(labelmap == c, connectivity, class_id=c) for c in classes}


# --------------------------------------------------------------------------
# size filtering and counting
# --------------------------------------------------------------------------

@dataclass
class SizeFilterParams:
    mean_area: dict[int, float]
    k: float = 3.0

    def __post_init__(self):
        if self.k <= 1:
            raise ValueError("tolerance factor k must be > 1")
        for c, mu in self.mean_area.items():
            if mu <= 0:
                raise ValueError(f"mean area for class {c} must be positive")

    def bounds(self, class_id: int) -> tuple[int, int]:
        """Inclusive integer area bounds: [mu/k, mu*k] rounded outward."""
        if class_id not in self.mean_area:
            raise KeyError(f"no mean area for class {class_id}")
        mu = self.mean_area[class_id]
        return math.floor(mu / self.k + 1e-9), math.ceil(mu * self.k - 1e-9)

    def keeps(self, class_id: int, area: int) -> bool:
        lo, hi = self.bounds(class_id)
        return lo <= area <= hi


def size_filter(regions: Sequence[Region], params: SizeFilterParams) -> list[Region]:
    """Keep regions whose pixel area lies in [mu/k, mu*k] for their class, bounds rounded outward."""
    return [reg for reg in regions if params.keeps(reg.class_id, reg.area)]


def estimate_size_params(labelmaps, k: float = 3.0, classes=PARASITE_CLASSES,
                         connectivity: int = 8) -> SizeFilterParams:
    """Mean ground-truth region area per class; classes never seen are left out."""
    areas = {c: [] for c in classes}
    for lm in labelmaps:
        for c, regs in class_regions(lm, classes, connectivity).items():
            areas[c] += [reg.area for reg in regs]
    return SizeFilterParams({c: float(np.mean(a)) for c, a in areas.items() if a}, k)


def count_parasites(labelmap: np.ndarray, params: SizeFilterParams | None = None,
                    connectivity: int = 8) -> dict[int, int]:
    counts = {}
    for c, regs in class_regions(labelmap, PARASITE_CLASSES, connectivity).items():
        if params is not None and regs:
            regs = size_filter(regs, params)
        counts[c] = len(regs)
    return counts


# --------------------------------------------------------------------------
# region matching
# --------------------------------------------------------------------------

@dataclass
class RegionMatch:
    gt: Region
    pred: Region | None
    jaccard: float


def match_regions(gt_regions: Sequence[Region], pred_regions: Sequence[Region],
                  shape) -> list[RegionMatch]:
    """Pair each ground-truth region with the same-class prediction it overlaps most.

    Overlap ties go to the larger predicted component, then to the earlier
    one in ``pred_regions`` order. Unmatched regions score J = 0.
    """
    by_class: dict[int | None, list[Region]] = {}
    for reg in pred_regions:
        by_class.setdefault(reg.class_id, []).append(reg)
    label_maps = {}
    for c, regs in by_class.items():
        lab = np.zeros(shape, dtype=np.int64)
        for i, reg in enumerate(regs, start=1):
            lab[reg.coords[:, 0], reg.coords[:, 1]] = i
        label_maps[c] = lab

    out = []
    for g in gt_regions:
        cands = by_class.get(g.class_id, [])
        best = None
        if cands:
            hits = label_maps[g.class_id][g.coords[:, 0], g.coords[:, 1]]
            inter = np.bincount(hits, minlength=len(cands) + 1)[1:]
            if inter.max() > 0:
                key = [(inter[i], cands[i].area, -i) for i in range(len(cands))]
                best = max(range(len(cands)), key=lambda i: key[i])
        if best is None:
            out.append(RegionMatch(g, None, 0.0))
            continue
        p = cands[best]
        i = int(inter[best])
        out.append(RegionMatch(g, p, i / (g.area + p.area - i)))
    return out


@dataclass
class DetectionRow:
    class_id: int
    thresholds: tuple[float, ...]
    fractions: tuple[float, ...]
    mean_j: float
    std_j: float
    n_regions: int


def detection_table(matches: Sequence[RegionMatch], thresholds=DEFAULT_THRESHOLDS,
                    classes=PARASITE_CLASSES) -> tuple[list[DetectionRow], list[str]]:
    """Per class: share of GT regions with J >= each threshold, mean and population std of J.

    Classes without ground-truth regions are omitted and reported in the notes.
    """
    rows, notes = [], []
    for c in classes:
        js = np.array([m.jaccard for m in matches if m.gt.class_id == c], dtype=np.float64)
        if js.size == 0:
            notes.append(f"{CLASS_NAMES[c]}: no ground-truth regions, row omitted")
            continue
        fr = tuple(float(np.count_nonzero(js >= t)) / js.size for t in thresholds)
        rows.append(DetectionRow(c, tuple(thresholds), fr, float(js.mean()), float(js.std()), int(js.size)))
    return rows, notes


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

@dataclass
class PixelRow:
    class_id: int
    dice: float
    precision: float
    recall: float
    f1: float
    pixel_pct: float


@dataclass
class MetricsReport:
    pixel_rows: list[PixelRow]
    detection_rows: list[DetectionRow]
    counts: dict[str, dict[int, int]]     # image id -> parasite counts
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    notes: list[str] = field(default_factory=list)

    def totals(self) -> dict[int, int]:
        tot = {c: 0 for c in PARASITE_CLASSES}
        for per in self.counts.values():
            for c, n in per.items():
                tot[c] += n
        return tot

    def threshold_columns(self) -> list[str]:
        return [f"j{int(round(t * 100))}" for t in self.thresholds]

    def pixel_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "dice", "precision", "recall", "f1", "pixel_pct"])
        for r in self.pixel_rows:
            w.writerow([CLASS_NAMES[r.class_id]] + [repr(float(v)) for v in
                                                   (r.dice, r.precision, r.recall, r.f1, r.pixel_pct)])
        return buf.getvalue()

    def detection_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", *self.threshold_columns(), "mean_j", "std_j"])
        for r in self.detection_rows:
            w.writerow([CLASS_NAMES[r.class_id], *[repr(f) for f in r.fractions], repr(r.mean_j), repr(r.std_j)])
        return buf.getvalue()

    def counts_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image", *[CLASS_NAMES[c] for c in PARASITE_CLASSES]])
        for image_id, per in self.counts.items():
            w.writerow([image_id, *[per[c] for c in PARASITE_CLASSES]])
        return buf.getvalue()

    def render(self) -> str:
        lines = ["Pixel-wise classification",
                 f"{'Class':<14}{'Dice':>8}{'Prec.':>8}{'Recall':>8}{'F1':>8}{'Pixels':>10}"]
        for r in self.pixel_rows:
            lines.append(f"{CLASS_NAMES[r.class_id].capitalize():<14}{r.dice:>8.3f}{r.precision:>8.3f}"
                         f"{r.recall:>8.3f}{r.f1:>8.3f}{r.pixel_pct:>9.2f}%")
        lines += ["", "Region detection (Jaccard J)",
                  f"{'Class':<14}" + "".join(f"{'J>=' + format(t, 'g'):>9}" for t in self.thresholds)
                  + f"{'Mean':>8}{'Std':>8}{'N':>6}"]
        for r in self.detection_rows:
            lines.append(f"{CLASS_NAMES[r.class_id].capitalize():<14}" + "".join(f"{f:>9.2f}" for f in r.fractions)
                         + f"{r.mean_j:>8.2f}{r.std_j:>8.2f}{r.n_regions:>6d}")
        tot = self.totals()
        lines += ["", "Parasite counts after size filtering: "
                  + ", ".join(f"{CLASS_NAMES[c]}={tot[c]}" for c in PARASITE_CLASSES)]
        lines += ["Dice is the per-image mean; precision/recall/F1 use counts pooled over all images."]
        lines += self.notes
        return "\n".join(lines) + "\n"


def build_report(pred_maps: Sequence[np.ndarray], gt_maps: Sequence[np.ndarray],
                 filter_params: SizeFilterParams | None = None, ids: Sequence[str] | None = None,
                 thresholds=DEFAULT_THRESHOLDS, connectivity: int = 8) -> MetricsReport:
    """Pixel metrics (Dice per image then averaged; P/R/F1 from pooled counts),
    region detection table and per-image parasite counts.

    Pixels whose ground truth is ``unknown`` are ignored by the pixel metrics.
    A class absent from both maps of an image does not enter that class's Dice mean.
    """
    if len(pred_maps) != len(gt_maps):
        raise ValueError(f"{len(pred_maps)} predictions for {len(gt_maps)} ground-truth maps")
    ids = list(ids) if ids is not None else [f"img{i:03d}" for i in range(len(gt_maps))]
    pooled = {c: ConfusionCounts(0, 0, 0, 0) for c in EVALUATED_CLASSES}
    dice_lists = {c: [] for c in EVALUATED_CLASSES}
    matches, counts = [], {}
    for image_id, pred, gt in zip(ids, pred_maps, gt_maps):
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"{image_id}: prediction {pred.shape} vs ground truth {gt.shape}")
        cc = confusion_from_maps(pred, gt, EVALUATED_CLASSES, ignore_label=UNKNOWN)
        keep = gt != UNKNOWN
        for c in EVALUATED_CLASSES:
            pooled[c] = pooled[c] + cc[c]
            x, y = (pred == c) & keep, (gt == c)
            if x.any() or y.any():
                dice_lists[c].append(dice_score(x, y))
        gt_regs = class_regions(gt, PARASITE_CLASSES, connectivity)
        pred_regs = class_regions(pred, PARASITE_CLASSES, connectivity)
        for c in PARASITE_CLASSES:
            matches += match_regions(gt_regs[c], pred_regs[c], gt.shape)
        counts[image_id] = {
            c: len(size_filter(pred_regs[c], filter_params) if filter_params and pred_regs[c] else pred_regs[c])
            for c in PARASITE_CLASSES
        }

    n_eval = pooled[EVALUATED_CLASSES[0]].total
    rows = []
    for c in EVALUATED_CLASSES:
        p, r, f1 = precision_recall_f1(pooled[c])
        d = float(np.mean(dice_lists[c])) if dice_lists[c] else 1.0
        gt_px = pooled[c].tp + pooled[c].fn
        rows.append(PixelRow(c, d, p, r, f1, 100.0 * gt_px / n_eval if n_eval else 0.0))
    det_rows, notes = detection_table(matches, thresholds)
    return MetricsReport(rows, det_rows, counts, tuple(thresholds), notes)


def parse_csv(text: str) -> list[dict[str, str]]:
    return list(csv.DictReader(io.StringIO(text)))
