"""Synthetic Giemsa-like micrographs with exact label maps.

Scenes contain host cells (cytoplasm ellipse with a nucleus), amastigotes
(small ovals inside cytoplasm), adhered promastigotes (spindles touching a
cell membrane from outside), free promastigotes (spindles in background) and
stain blobs labelled ``unknown``. Parasite instances never touch each other,
so connected components of the label map equal the placed instances.

Instance sizes are chosen so each image reproduces a class-frequency profile;
per-class instance counts can be forced instead.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt

from .classes import (
    ADHERED,
    AMASTIGOTE,
    BACKGROUND,
    CYTOPLASM,
    DENSE_PROFILE,
    NUCLEUS,
    NUM_CLASSES,
    PROMASTIGOTE,
    REFERENCE_PROFILE,
    UNKNOWN,
)
from .data import LabeledImage

PROFILES = {"reference": REFERENCE_PROFILE, "dense": DENSE_PROFILE}

# mean RGB per class; parasite classes get distinct stain tints
PALETTE = np.array([
    [0.93, 0.90, 0.92],   # background
    [0.78, 0.62, 0.80],   # cytoplasm
    [0.46, 0.26, 0.58],   # nucleus
    [0.30, 0.34, 0.70],   # promastigote
    [0.68, 0.24, 0.42],   # adhered
    [0.25, 0.10, 0.30],   # amastigote
    [0.62, 0.48, 0.28],   # unknown (stain blob)
])


class InfeasibleSceneError(ValueError):
    """The requested instances cannot be placed in the image."""


Range = tuple[float, float]


@dataclass
class SynthParams:
    height: int = 448
    width: int = 448
    profile: str | dict = "reference"
    # explicit instance count ranges (inclusive); None derives counts from the profile
    cells: tuple[int, int] | None = None
    promastigotes: tuple[int, int] | None = None
    adhered: tuple[int, int] | None = None
    amastigotes: tuple[int, int] | None = None
    blobs: tuple[int, int] | None = None
    # typical instance areas (pixels) used to pick counts and explicit-count sizes
    cell_area: Range = (500.0, 1400.0)
    promastigote_area: Range = (30.0, 70.0)
    amastigote_area: Range = (12.0, 24.0)
    blob_area: Range = (20.0, 120.0)
    promastigote_aspect: Range = (3.0, 4.5)   # fusiform length / width
    amastigote_aspect: Range = (1.2, 1.6)
    cell_aspect: Range = (1.0, 1.3)
    rosettes: bool = False                    # cluster free promastigotes radially
    rosette_size: tuple[int, int] = (5, 9)
    gap: int = 1                              # empty pixels kept between instances
    noise: float = 0.03
    max_tries: int = 400
    seed: int = 0

    def profile_dict(self) -> dict[int, float]:
        prof = PROFILES[self.profile] if isinstance(self.profile, str) else self.profile
        return {int(k): float(v) for k, v in prof.items()}


# --------------------------------------------------------------------------
# shape rasterisation (local masks centred in their own bounding box)
# --------------------------------------------------------------------------

def _local_grid(radius: float, offset):
    r = int(np.ceil(radius)) + 1
    ys, xs = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    return ys - offset[0], xs - offset[1], r


def ellipse_mask(a: float, b: float, theta: float, offset=(0.0, 0.0)):
    """Boolean mask of an ellipse with semi-axes a (along theta) and b."""
    ys, xs, r = _local_grid(max(a, b), offset)
    u = xs * np.cos(theta) + ys * np.sin(theta)
    v = -xs * np.sin(theta) + ys * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0, r


def spindle_mask(length: float, width: float, theta: float, offset=(0.0, 0.0)):
    """Fusiform body: half-width (width/2)(1 - (2u/L)^2) along the axis."""
    ys, xs, r = _local_grid(length / 2.0, offset)
    u = xs * np.cos(theta) + ys * np.sin(theta)
    v = -xs * np.sin(theta) + ys * np.cos(theta)
    half = 0.5 * width * (1.0 - (2.0 * u / length) ** 2)
    return (np.abs(u) <= length / 2.0) & (np.abs(v) <= half), r


def spindle_dims(area: float, aspect: float) -> tuple[float, float]:
    length = np.sqrt(1.5 * area * aspect)
    return length, length / aspect


def ellipse_dims(area: float, aspect: float) -> tuple[float, float]:
    b = np.sqrt(area / (np.pi * aspect))
    return aspect * b, b


def _dilate(mask: np.ndarray, steps: int) -> np.ndarray:
    out = np.pad(mask, steps)
    for _ in range(steps):
        grown = out.copy()
        grown[1:, :] |= out[:-1, :]
        grown[:-1, :] |= out[1:, :]
        grown[:, 1:] |= out[:, :-1]
        grown[:, :-1] |= out[:, 1:]
        grown[1:, 1:] |= out[:-1, :-1]
        grown[1:, :-1] |= out[:-1, 1:]
        grown[:-1, 1:] |= out[1:, :-1]
        grown[:-1, :-1] |= out[1:, 1:]
        out = grown
    return out


# --------------------------------------------------------------------------
# scene assembly
# --------------------------------------------------------------------------

def _clip_window(arr, mask, top, left):
    """Slice of ``arr`` under ``mask`` placed at (top, left), and the matching part of ``mask``."""
    h, w = arr.shape
    t0, l0 = max(top, 0), max(left, 0)
    t1, l1 = min(top + mask.shape[0], h), min(left + mask.shape[1], w)
    return arr[t0:t1, l0:l1], mask[t0 - top:t1 - top, l0 - left:l1 - left]


class _Scene:
    def __init__(self, h: int, w: int, gap: int):
        self.labels = np.zeros((h, w), dtype=np.uint8)
        self.inst = np.zeros((h, w), dtype=np.int32)
        self.gap = gap
        self.next_id = 1

    def inside(self, mask, top, left) -> bool:
        h, w = self.labels.shape
        return top >= 0 and left >= 0 and top + mask.shape[0] <= h and left + mask.shape[1] <= w

    def fits(self, mask, r, cy, cx, allow_ids=(), need_touch=None) -> bool:
        """Free placement of a local mask centred at (cy, cx): no overlap, and
        nothing but ``allow_ids`` within ``gap`` pixels."""
        top, left = cy - r, cx - r
        if not self.inside(mask, top, left):
            return False
        win, m = _clip_window(self.inst, mask, top, left)
        if np.any(win[m]):
            return False
        g = max(self.gap, 1)
        near_win, near_m = _clip_window(self.inst, _dilate(mask, g), top - g, left - g)
        near = near_win[near_m]
        near = near[near > 0]
        if near.size and not np.all(np.isin(near, allow_ids)):
            return False
        if need_touch is not None:
            touch_win, touch_m = _clip_window(self.inst, _dilate(mask, 1), top - 1, left - 1)
            return bool(np.any(touch_win[touch_m] == need_touch))
        return True

    def fits_inside(self, mask, r, cy, cx, cell_id) -> bool:
        """Placement inside a cell: the mask grown by ``gap`` must be cytoplasm of ``cell_id``."""
        g = max(self.gap, 1)
        top, left = cy - r - g, cx - r - g
        grown = _dilate(mask, g)
        if not self.inside(grown, top, left):
            return False
        sl = (slice(top, top + grown.shape[0]), slice(left, left + grown.shape[1]))
        return bool(np.all((self.inst[sl][grown] == cell_id) & (self.labels[sl][grown] == CYTOPLASM)))

    def paint(self, mask, r, cy, cx, label, instance_id=None, only_on=None):
        top, left = cy - r, cx - r
        sl = (slice(top, top + mask.shape[0]), slice(left, left + mask.shape[1]))
        m = mask if only_on is None else mask & (self.labels[sl] == only_on)
        if instance_id is None:
            instance_id = self.next_id
            self.next_id += 1
        self.labels[sl][m] = label
        self.inst[sl][m] = instance_id
        return instance_id


def _split_area(total: float, n: int, rng, jitter: float = 0.3) -> np.ndarray:
    w = 1.0 + rng.uniform(-jitter, jitter, size=n)
    return total * w / w.sum()


def _count(rng, explicit, target_area, typical: Range) -> int:
    if explicit is not None:
        lo, hi = explicit
        return int(rng.integers(lo, hi + 1))
    if target_area <= 0:
        return 0
    return max(1, int(round(target_area / np.mean(typical))))


def _areas(rng, n, explicit, target_area, typical: Range) -> np.ndarray:
    if n == 0:
        return np.zeros(0)
    if explicit is not None:
        return rng.uniform(*typical, size=n)
    return _split_area(target_area, n, rng)


def _render(labels: np.ndarray, inst: np.ndarray, rng, noise: float) -> np.ndarray:
    h, w = labels.shape
    tint = PALETTE * rng.uniform(0.96, 1.04, size=(1, 3))
    rgb = tint[labels].copy()
    # mild per-instance shading
    n_inst = int(inst.max()) + 1
    shade = rng.uniform(-0.03, 0.03, size=n_inst)
    shade[0] = 0.0
    rgb += shade[inst][..., None]
    # slow illumination gradient
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    gy, gx = rng.uniform(-0.04, 0.04, size=2)
    rgb += (gy * (yy - 0.5) + gx * (xx - 0.5))[..., None]
    rgb += rng.normal(0.0, noise, size=rgb.shape)
    rgb = np.clip(rgb, 0.0, 1.0)
    # quantise to 8 bits so saved files reload bit-identically
    return (np.rint(rgb * 255.0) / 255.0).transpose(2, 0, 1)


def _candidates(scene, r: int, clearance: float) -> np.ndarray:
    """Flat indices of centres at least ``r`` from the border and at least
    ``clearance`` from every occupied pixel."""
    h, w = scene.labels.shape
    ok = distance_transform_edt(scene.inst == 0) >= clearance
    ok[:r, :] = False
    ok[max(h - r, 0):, :] = False
    ok[:, :r] = False
    ok[:, max(w - r, 0):] = False
    return np.flatnonzero(ok)


def _place_free(scene, rng, make_mask, clearance: float, tries: int):
    """Place a freely floating instance; ``make_mask()`` draws a fresh
    (mask, r) each try. Returns (mask, r, cy, cx) or None."""
    mask, r = make_mask()
    cand = _candidates(scene, r, clearance)
    if cand.size == 0:
        return None
    w = scene.labels.shape[1]
    for _ in range(tries):
        k = int(cand[rng.integers(cand.size)])
        cy, cx = k // w, k % w
        if scene.fits(mask, r, cy, cx):
            return mask, r, cy, cx
        mask, r = make_mask()
    return None


def synth_image(params: SynthParams, rng: np.random.Generator, image_id: str = "",
                attempts: int = 5) -> LabeledImage:
    """One scene. Crowded scenes that cannot be completed are redrawn from the
    same stream up to ``attempts`` times before giving up."""
    for attempt in range(attempts):
        try:
            return _synth_once(params, rng, image_id)
        except InfeasibleSceneError:
            if attempt == attempts - 1:
                raise


def _synth_once(params: SynthParams, rng: np.random.Generator, image_id: str) -> LabeledImage:
    h, w = params.height, params.width
    npx = h * w
    prof = params.profile_dict()
    target = {c: prof.get(c, 0.0) * npx for c in range(NUM_CLASSES)}
    scene = _Scene(h, w, params.gap)
    tries = params.max_tries

    def fail(what):
        raise InfeasibleSceneError(f"could not place {what} in a {h}x{w} image after {tries} tries")

    # host cells with nuclei
    cell_total = target[CYTOPLASM] + target[NUCLEUS] + target[AMASTIGOTE]
    n_cells = _count(rng, params.cells, cell_total, params.cell_area)
    cell_areas = _areas(rng, n_cells, params.cells, cell_total, params.cell_area)
    nuc_frac = target[NUCLEUS] / cell_total if cell_total > 0 else 0.15
    cells = []
    for area in cell_areas:
        a, b = ellipse_dims(area, rng.uniform(*params.cell_aspect))
        got = _place_free(scene, rng, lambda: ellipse_mask(a, b, rng.uniform(0, np.pi)),
                          b + params.gap, tries)
        if got is None:
            fail("a host cell")
        mask, r, cy, cx = got
        theta = _orientation(mask)
        cid = scene.paint(mask, r, cy, cx, CYTOPLASM)
        # nucleus: same orientation, shrunk, nudged off centre but well inside
        s = np.sqrt(nuc_frac)
        off = rng.uniform(-0.3, 0.3, size=2) * (1 - s) * b
        nmask, nr = ellipse_mask(s * a, s * b, theta, offset=(off[0] % 1, off[1] % 1))
        ncy, ncx = cy + int(np.floor(off[0])), cx + int(np.floor(off[1]))
        scene.paint(nmask, nr, ncy, ncx, NUCLEUS, instance_id=cid, only_on=CYTOPLASM)
        cells.append((cid, cy, cx, a, b, theta, area))

    # amastigotes inside cytoplasm
    n_am = _count(rng, params.amastigotes, target[AMASTIGOTE], params.amastigote_area)
    if n_am and not cells:
        raise InfeasibleSceneError("amastigotes need at least one host cell")
    am_areas = _areas(rng, n_am, params.amastigotes, target[AMASTIGOTE], params.amastigote_area)
    for area in am_areas:
        a, b = ellipse_dims(area, rng.uniform(*params.amastigote_aspect))
        cyto = distance_transform_edt(scene.labels == CYTOPLASM)
        cand = np.flatnonzero(cyto > b + params.gap)
        for _ in range(tries if cand.size else 0):
            k = int(cand[rng.integers(cand.size)])
            cy, cx = divmod(k, w)
            mask, r = ellipse_mask(a, b, rng.uniform(0, np.pi))
            if scene.fits_inside(mask, r, cy, cx, scene.inst[cy, cx]):
                break
        else:
            fail("an amastigote")
        scene.paint(mask, r, cy, cx, AMASTIGOTE)

    # adhered promastigotes touching a cell from outside
    n_ad = _count(rng, params.adhered, target[ADHERED], params.promastigote_area)
    if n_ad and not cells:
        raise InfeasibleSceneError("adhered parasites need at least one host cell")
    ad_areas = _areas(rng, n_ad, params.adhered, target[ADHERED], params.promastigote_area)
    for area in ad_areas:
        length, width = spindle_dims(area, rng.uniform(*params.promastigote_aspect))
        placed = False
        for _ in range(tries // 4):
            cid, ccy, ccx, ca, cb, ctheta, _ = cells[int(rng.integers(len(cells)))]
            phi = rng.uniform(0, 2 * np.pi)
            rb = ca * cb / np.hypot(cb * np.cos(phi), ca * np.sin(phi))
            direction = phi + ctheta
            theta = direction + rng.uniform(-0.3, 0.3)
            mask, r = spindle_mask(length, width, theta)
            for s in np.arange(length / 2 - 2, length / 2 + 6, 0.5):
                cy = int(round(ccy + (rb + s) * np.sin(direction)))
                cx = int(round(ccx + (rb + s) * np.cos(direction)))
                if scene.fits(mask, r, cy, cx, allow_ids=(cid,), need_touch=cid):
                    placed = True
                    break
            if placed:
                break
        if not placed:
            fail("an adhered parasite")
        scene.paint(mask, r, cy, cx, ADHERED)

    # free promastigotes, optionally in rosettes
    n_pro = _count(rng, params.promastigotes, target[PROMASTIGOTE], params.promastigote_area)
    pro_areas = list(_areas(rng, n_pro, params.promastigotes, target[PROMASTIGOTE], params.promastigote_area))
    while pro_areas:
        if not (params.rosettes and len(pro_areas) > 1):
            _place_free_spindle(scene, rng, pro_areas.pop(0), params, fail)
            continue
        k = int(rng.integers(params.rosette_size[0], params.rosette_size[1] + 1))
        group, pro_areas = pro_areas[:k], pro_areas[k:]
        dims = [spindle_dims(a, rng.uniform(*params.promastigote_aspect)) for a in group]
        reach = int(np.ceil(max(d[0] for d in dims) + 3))
        cand = _candidates(scene, reach // 2, reach / 2)
        if cand.size == 0:
            ry, rx = scene.labels.shape[0] // 2, scene.labels.shape[1] // 2
        else:
            k = int(cand[rng.integers(cand.size)])
            ry, rx = divmod(k, scene.labels.shape[1])
        start = rng.uniform(0, 2 * np.pi)
        for j, ((length, width), area) in enumerate(zip(dims, group)):
            for step in range(12):
                ang = start + 2 * np.pi * (j + step / 12.0) / len(dims)
                dist = length / 2 + 3.0
                cy = int(round(ry + dist * np.sin(ang)))
                cx = int(round(rx + dist * np.cos(ang)))
                mask, r = spindle_mask(length, width, ang)
                if scene.fits(mask, r, cy, cx):
                    scene.paint(mask, r, cy, cx, PROMASTIGOTE)
                    break
            else:
                _place_free_spindle(scene, rng, area, params, fail)

    # stain blobs
    n_bl = _count(rng, params.blobs, target[UNKNOWN], params.blob_area)
    for area in _areas(rng, n_bl, params.blobs, target[UNKNOWN], params.blob_area):
        a, b = ellipse_dims(area, rng.uniform(1.0, 1.8))
        got = _place_free(scene, rng, lambda: ellipse_mask(a, b, rng.uniform(0, np.pi)),
                          b + params.gap, tries)
        if got is None:
            fail("a stain blob")
        mask, r, cy, cx = got
        scene.paint(mask, r, cy, cx, UNKNOWN)

    labels = scene.labels
    instances = {
        "cells": len(cells),
        PROMASTIGOTE: n_pro,
        ADHERED: n_ad,
        AMASTIGOTE: n_am,
        UNKNOWN: n_bl,
    }
    rgb = _render(labels, scene.inst, rng, params.noise)
    return LabeledImage(rgb, labels, image_id, {"instances": instances})


def _place_free_spindle(scene, rng, area, params, fail):
    length, width = spindle_dims(area, rng.uniform(*params.promastigote_aspect))
    got = _place_free(scene, rng, lambda: spindle_mask(length, width, rng.uniform(0, np.pi)),
                      width / 2 + params.gap, params.max_tries)
    if got is None:
        fail("a promastigote")
    mask, r, cy, cx = got
    scene.paint(mask, r, cy, cx, PROMASTIGOTE)


def _orientation(mask) -> float:
    """Major-axis angle of a binary mask from its second moments."""
    ys, xs = np.nonzero(mask)
    ys, xs = ys - ys.mean(), xs - xs.mean()
    return 0.5 * np.arctan2(2 * (xs * ys).mean(), (xs ** 2).mean() - (ys ** 2).mean())


def synth_generate(params: SynthParams, count: int = 1, prefix: str = "img") -> list[LabeledImage]:
    """Generate ``count`` images; image i uses the stream seeded by (seed, i)."""
    return [
        synth_image(params, np.random.default_rng([params.seed, i]), f"{prefix}{i:03d}")
        for i in range(count)
    ]


def class_frequencies(images) -> np.ndarray:
    counts = np.zeros(NUM_CLASSES, dtype=np.int64)
    for im in images:
        counts += np.bincount(im.labels.ravel(), minlength=NUM_CLASSES)
    return counts / counts.sum()
