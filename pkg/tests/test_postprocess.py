import itertools

import numpy as np
import pytest

from leishseg.classes import PARASITE_CLASSES
from leishseg.postprocess import (Region, RegionMatch, SizeFilterParams, build_report, connected_components,
                                  count_parasites, detection_table, estimate_size_params, match_regions,
                                  parse_csv, size_filter)
from leishseg.synth import SynthParams, synth_generate
from oracles import brute_confusion, flood_fill_components, set_metrics


def _partition(regions):
    return sorted(sorted(r.pixels) for r in regions)


# ---------------------------------------------------------------- CCL

def test_single_pixel_region():
    m = np.zeros((3, 3), bool)
    m[1, 1] = True
    regs = connected_components(m)
    assert len(regs) == 1 and regs[0].area == 1


def test_diagonal_connectivity():
    m = np.eye(2, dtype=bool)
    assert len(connected_components(m, 8)) == 1
    assert len(connected_components(m, 4)) == 2


def test_regions_sorted_by_bbox_corner():
    m = np.zeros((6, 6), bool)
    m[0, 5] = m[1, 5] = True      # first pixel at (0,5)
    m[0:3, 0] = True              # first pixel at (0,0)
    m[4, 2] = True
    regs = connected_components(m)
    assert [r.bbox[:2] for r in regs] == [(0, 0), (0, 5), (4, 2)]


@pytest.mark.parametrize("conn", [4, 8])
def test_ccl_matches_flood_fill_random(conn):
    rng = np.random.default_rng(conn)
    for _ in range(200):
        m = rng.random((32, 32)) < rng.uniform(0.2, 0.7)
        assert _partition(connected_components(m, conn)) == sorted(sorted(c) for c in flood_fill_components(m, conn))


def test_ccl_matches_flood_fill_small_exhaustive_3x3():
    for bits in itertools.product([0, 1], repeat=9):
        m = np.array(bits, bool).reshape(3, 3)
        for conn in (4, 8):
            assert _partition(connected_components(m, conn)) == sorted(sorted(c) for c in flood_fill_components(m, conn))


def test_bad_connectivity():
    with pytest.raises(ValueError):
        connected_components(np.ones((2, 2), bool), 6)


# -------------------------------------------------------------- filter

def _region(area, cls=3):
    return Region(cls, np.array([(0, i) for i in range(area)]))


def test_size_filter_interval():
    params = SizeFilterParams({3: 100.0}, k=3)
    kept = size_filter([_region(a) for a in (10, 33, 100, 300, 500)], params)
    assert [r.area for r in kept] == [33, 100, 300]
    assert params.keeps(3, 100) and params.keeps(3, 300) and not params.keeps(3, 301)
    assert params.bounds(3) == (33, 300)


def test_size_filter_idempotent_and_monotone():
    rng = np.random.default_rng(0)
    regs = [_region(int(a)) for a in rng.integers(1, 400, 50)]
    params = SizeFilterParams({3: 90.0}, k=2.5)
    once = size_filter(regs, params)
    assert len(once) <= len(regs)
    assert [r.area for r in size_filter(once, params)] == [r.area for r in once]


def test_size_filter_missing_mean():
    with pytest.raises(KeyError):
        size_filter([_region(5, cls=4)], SizeFilterParams({3: 10.0}))


def test_estimate_size_params():
    lm = np.zeros((10, 10), np.uint8)
    lm[0:2, 0:2] = 3
    lm[5:7, 5:9] = 3
    lm[9, 9] = 5
    p = estimate_size_params([lm])
    assert p.mean_area == {3: 6.0, 5: 1.0}


def test_count_examples():
    assert count_parasites(np.zeros((5, 5), np.uint8)) == {3: 0, 4: 0, 5: 0}
    lm = np.zeros((8, 8), np.uint8)
    lm[1:3, 1:3] = 5
    lm[1:3, 4:6] = 5
    assert count_parasites(lm)[5] == 2
    lm[1:3, 3] = 5  # bridge the two instances
    assert count_parasites(lm)[5] == 1


def test_counts_match_generator_instances():
    ims = synth_generate(SynthParams(height=96, width=96, profile="dense", seed=3), 3)
    for im in ims:
        counts = count_parasites(im.labels)
        for c in PARASITE_CLASSES:
            assert counts[c] == im.meta["instances"][c]


# ------------------------------------------------------------- matching

def _regs(lm, c):
    return connected_components(lm == c, class_id=c)


def test_match_identical():
    lm = np.zeros((8, 8), np.uint8)
    lm[1:3, 1:3] = 4
    lm[5:7, 2:7] = 4
    ms = match_regions(_regs(lm, 4), _regs(lm, 4), lm.shape)
    assert [m.jaccard for m in ms] == [1.0, 1.0]


def test_match_no_prediction():
    lm = np.zeros((8, 8), np.uint8)
    lm[1:3, 1:3] = 4
    ms = match_regions(_regs(lm, 4), [], lm.shape)
    assert ms[0].pred is None and ms[0].jaccard == 0.0


def test_match_split_by_gap_picks_left_half():
    gt = np.zeros((6, 6), np.uint8)
    gt[1:5, 1:5] = 3
    pred = np.zeros_like(gt)
    pred[1:5, 1:2] = 3
    pred[1:5, 4:5] = 3
    ms = match_regions(_regs(gt, 3), _regs(pred, 3), gt.shape)
    # each part covers 4 of 16 pixels; the tie goes to the earlier (left) one
    assert ms[0].pred.bbox[1] == 1
    assert ms[0].jaccard == pytest.approx(4 / 16)


def test_match_split_equal_halves_gives_half():
    # GT 2x4 block; prediction covers it as two 2x2 halves touching only via GT
    gt = np.zeros((4, 6), np.uint8)
    gt[1:3, 1:5] = 5
    left = Region(5, np.argwhere(np.pad(np.ones((2, 2), bool), ((1, 1), (1, 3)))))
    right = Region(5, np.argwhere(np.pad(np.ones((2, 2), bool), ((1, 1), (3, 1)))))
    ms = match_regions(_regs(gt, 5), [left, right], gt.shape)
    assert ms[0].pred is left
    assert ms[0].jaccard == 0.5


def test_match_tie_prefers_larger_component():
    gt = np.zeros((5, 8), np.uint8)
    gt[2, 2:6] = 3
    small = Region(3, np.array([[2, 2], [2, 3]]))
    big = Region(3, np.array([[2, 4], [2, 5], [3, 4], [3, 5], [4, 5]]))
    ms = match_regions(_regs(gt, 3), [small, big], gt.shape)
    assert ms[0].pred is big


# ------------------------------------------------------------- detection

def _matches(js, c=3):
    return [RegionMatch(_region(1, c), None, j) for j in js]


def test_detection_all_perfect():
    rows, _ = detection_table(_matches([1.0, 1.0]))
    assert rows[0].fractions == (1.0, 1.0, 1.0) and rows[0].mean_j == 1.0 and rows[0].std_j == 0.0


def test_detection_arithmetic():
    rows, notes = detection_table(_matches([0.3, 0.6, 0.9]))
    r = rows[0]
    assert r.fractions == pytest.approx((1.0, 2 / 3, 1 / 3))
    assert r.mean_j == pytest.approx(0.6)
    assert r.std_j == pytest.approx(np.sqrt(0.06))
    assert len(notes) == 2  # adhered and amastigote rows omitted


def test_detection_monotone():
    rng = np.random.default_rng(0)
    for _ in range(100):
        rows, _ = detection_table(_matches(rng.random(rng.integers(1, 20))))
        f = rows[0].fractions
        assert f[0] >= f[1] >= f[2]


# ---------------------------------------------------------------- report

def test_report_perfect():
    ims = synth_generate(SynthParams(height=64, width=64, profile="dense", seed=1), 2)
    gts = [im.labels for im in ims]
    rep = build_report(gts, gts, estimate_size_params(gts))
    assert all(r.dice == r.precision == r.recall == r.f1 == 1.0 for r in rep.pixel_rows)
    assert all(f == 1.0 for r in rep.detection_rows for f in r.fractions)


def test_report_all_background():
    gt = np.zeros((16, 16), np.uint8)
    gt[4:8, 4:8] = 3
    pred = np.zeros_like(gt)
    rep = build_report([pred], [gt])
    rows = {r.class_id: r for r in rep.pixel_rows}
    assert rows[0].recall == 1.0
    assert rows[3].recall == 0.0
    assert rep.detection_rows[0].fractions == (0.0, 0.0, 0.0)


def test_report_unpaired():
    with pytest.raises(ValueError):
        build_report([np.zeros((2, 2))], [])


def _oracle_report(preds, gts):
    """Every report cell from sets, per-pixel tallies and flood fill."""
    pixel = {}
    for c in range(6):
        tp = fp = fn = tn = 0
        dices = []
        for p, g in zip(preds, gts):
            a, b, cc, d = brute_confusion(p, g, c)
            tp, fp, fn, tn = tp + a, fp + b, fn + cc, tn + d
            x, y = (p == c) & (g != 6), g == c
            if x.any() or y.any():
                dices.append(set_metrics(x, y)[0])
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
        pixel[c] = (float(np.mean(dices)) if dices else 1.0, prec, rec, f1)
    js = {c: [] for c in PARASITE_CLASSES}
    for p, g in zip(preds, gts):
        for c in PARASITE_CLASSES:
            pcs = flood_fill_components(p == c)
            for gc in flood_fill_components(g == c):
                inter = [len(gc & pc) for pc in pcs]
                if not inter or max(inter) == 0:
                    js[c].append(0.0)
                    continue
                best = max(range(len(pcs)), key=lambda i: (inter[i], len(pcs[i]),
                                                           -min(r for r, _ in pcs[i]), -min(q for _, q in pcs[i])))
                js[c].append(inter[best] / len(gc | pcs[best]))
    return pixel, js


def test_report_matches_oracle():
    ims = synth_generate(SynthParams(height=64, width=64, profile="dense", seed=5), 5)
    rng = np.random.default_rng(0)
    gts = [im.labels for im in ims]
    preds = []
    for g in gts:
        p = g.copy()
        noise = rng.random(g.shape) < 0.08
        p[noise] = rng.integers(0, 6, noise.sum())
        preds.append(p)
    rep = build_report(preds, gts)
    pixel, js = _oracle_report(preds, gts)
    for row in rep.pixel_rows:
        assert (row.dice, row.precision, row.recall, row.f1) == pytest.approx(pixel[row.class_id], abs=1e-12)
    for row in rep.detection_rows:
        j = np.array(js[row.class_id])
        assert row.n_regions == j.size
        assert row.mean_j == pytest.approx(j.mean(), abs=1e-12)
        assert row.fractions == pytest.approx(tuple((j >= t).mean() for t in (0.25, 0.5, 0.75)), abs=1e-12)


def test_report_csv_parses():
    ims = synth_generate(SynthParams(height=64, width=64, profile="dense", seed=2), 2)
    gts = [im.labels for im in ims]
    rep = build_report(gts, gts)
    pix = parse_csv(rep.pixel_csv())
    assert list(pix[0]) == ["class", "dice", "precision", "recall", "f1", "pixel_pct"]
    assert len(pix) == 6
    det = parse_csv(rep.detection_csv())
    assert list(det[0]) == ["class", "j25", "j50", "j75", "mean_j", "std_j"]
    assert "Pixel-wise classification" in rep.render()
