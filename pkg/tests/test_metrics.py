import csv
import itertools
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from vpseg.metrics import (
    EmptyClassError,
    aggregate,
    boundary,
    dice,
    image_metrics,
    jaccard,
    surface_distances,
)


def random_mask(rng, shape, K=2, blobs=3):
    """Random union of rectangles so boundaries are non-trivial."""
    m = np.zeros(shape, dtype=int)
    for _ in range(blobs):
        k = rng.integers(1, K)
        y0, x0 = rng.integers(0, shape[0]), rng.integers(0, shape[1])
        h, w = rng.integers(1, shape[0] // 2 + 2), rng.integers(1, shape[1] // 2 + 2)
        m[y0 : y0 + h, x0 : x0 + w] = k
    return m


def brute_boundary(region):
    H, W = region.shape
    out = np.zeros_like(region)
    for y, x in itertools.product(range(H), range(W)):
        if not region[y, x]:
            continue
        for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            yy, xx = y + dy, x + dx
            if not (0 <= yy < H and 0 <= xx < W) or not region[yy, xx]:
                out[y, x] = True
    return out


def brute_surface(a, b, k):
    pa = np.argwhere(brute_boundary(a == k)).astype(float)
    pb = np.argwhere(brute_boundary(b == k)).astype(float)
    dab = [min(math.dist(p, q) for q in pb) for p in pa]
    dba = [min(math.dist(p, q) for q in pa) for p in pb]
    pooled = sorted(dab + dba)
    rank = math.ceil(0.95 * len(pooled))
    return sum(pooled) / len(pooled), pooled[rank - 1]


def test_dice_jaccard_hand_cases():
    a = np.zeros((3, 3), int)
    a[0, :2] = a[1, :2] = 1  # 4 px
    b = np.zeros((3, 3), int)
    b[0, :2] = 1  # 2 px inside a
    assert dice(a, b, 1) == pytest.approx(2 / 3)
    assert jaccard(a, b, 1) == pytest.approx(0.5)
    assert dice(a, a, 1) == 1.0 and jaccard(a, a, 1) == 1.0
    c = np.zeros((3, 3), int)
    c[2, 2] = 1
    assert dice(a, c, 1) == 0.0
    assert dice(a, b, 2) == 1.0 and jaccard(a, b, 2) == 1.0  # both empty
    with pytest.raises(ValueError):
        dice(a, np.zeros((2, 2), int), 1)


def test_dice_jaccard_vs_set_oracle_and_identity():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = rng.integers(0, 3, (7, 6))
        b = rng.integers(0, 3, (7, 6))
        for k in range(3):
            A = {tuple(p) for p in np.argwhere(a == k)}
            B = {tuple(p) for p in np.argwhere(b == k)}
            j = len(A & B) / len(A | B) if A | B else 1.0
            assert jaccard(a, b, k) == pytest.approx(j, abs=1e-15)
            d = dice(a, b, k)
            assert dice(b, a, k) == d
            assert abs(jaccard(a, b, k) - d / (2 - d)) <= 1e-9


def test_boundary_border_counts_as_outside():
    full = np.ones((3, 4), bool)
    b = boundary(full)
    assert b[0].all() and b[-1].all() and b[:, 0].all() and b[:, -1].all()
    assert not b[1, 1] and not b[1, 2]


def test_surface_distance_hand_cases():
    a = np.zeros((5, 5), int)
    a[1, 1] = 1
    b = np.zeros((5, 5), int)
    b[1, 4] = 1
    assert surface_distances(a, b, 1) == (3.0, 3.0)
    assert surface_distances(a, a, 1) == (0.0, 0.0)
    with pytest.raises(EmptyClassError) as info:
        surface_distances(a, np.zeros((5, 5), int), 1)
    assert info.value.sentinel == pytest.approx(math.hypot(5, 5))


def test_surface_distances_vs_brute_force():
    rng = np.random.default_rng(1)
    checked = 0
    while checked < 20:
        shape = tuple(rng.integers(4, 17, 2))
        a, b = random_mask(rng, shape), random_mask(rng, shape)
        if not (a == 1).any() or not (b == 1).any():
            continue
        assert_allclose(brute_boundary(a == 1), boundary(a == 1))
        assert surface_distances(a, b, 1) == pytest.approx(brute_surface(a, b, 1), abs=1e-12)
        assert surface_distances(a, b, 1) == pytest.approx(surface_distances(b, a, 1), abs=1e-12)
        checked += 1


def test_permutation_invariance():
    rng = np.random.default_rng(2)
    a, b = random_mask(rng, (9, 9)), random_mask(rng, (9, 9))
    # the same geometry transposed gives the same metrics
    assert dice(a, b, 1) == dice(a.T, b.T, 1)
    if (a == 1).any() and (b == 1).any():
        assert surface_distances(a, b, 1) == pytest.approx(surface_distances(a.T, b.T, 1))


def test_image_metrics_sentinels():
    gt = np.zeros((4, 4), int)
    gt[1:3, 1:3] = 1
    pred = np.zeros((4, 4), int)
    m = image_metrics(pred, gt, 3)
    assert m["asd"][1] == m["hd95"][1] == pytest.approx(math.hypot(4, 4))
    assert m["asd"][2] == 0.0 and m["dice"][2] == 1.0


def test_report_identity_and_csv(tmp_path):
    rng = np.random.default_rng(3)
    pairs = [(rng.integers(0, 3, (8, 8)), rng.integers(0, 3, (8, 8))) for _ in range(5)]
    report = aggregate(pairs, 3)
    assert report.n_images == 5
    assert_allclose(report.jaccard, report.dice / (2 - report.dice), atol=1e-9)
    assert report.mean_dice == pytest.approx(report.dice[1:].mean())
    report.to_csv(tmp_path / "m.csv")
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows[0] == ["class", "dice", "jaccard", "asd", "hd95"]
    assert [r[0] for r in rows[1:]] == ["0", "1", "2", "mean"]
    with pytest.raises(ValueError):
        aggregate([], 3)
