import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sspnet.anchors import (SCALE_INTERVALS, AnchorKMeans, AnchorSpec, GtBox, geometric_ladder, iof, iou,
                            kmeans_anchors, kmeans_wh, match_anchors, mean_best_iou, pairwise,
                            partition_by_scale, supervised_heatmaps)

from oracles import brute_iou, rasterize

SHAPES = {2: (16, 16), 3: (8, 8), 4: (4, 4), 5: (2, 2)}
STRIDES = {2: 4, 3: 8, 4: 16, 5: 32}


def three_clusters(seed=0, n=60):
    rng = np.random.default_rng(seed)
    centres = np.array([[3.0, 6.0], [7.0, 13.0], [18.0, 30.0]])
    wh = np.concatenate([c * np.exp(rng.normal(0, 0.08, size=(n, 2))) for c in centres])
    return [GtBox(0.0, 0.0, float(w), float(h)) for w, h in wh]


# -- boxes --------------------------------------------------------------------

def test_gtbox_scale_and_validation():
    assert GtBox(0, 0, 4, 9).scale == 6.0
    with pytest.raises(ValueError):
        GtBox(0, 0, 0, 3)


def test_iof_examples():
    a = GtBox(0, 0, 10, 10)
    assert iof(a, (-5, -5, 30, 30)) == 1.0
    assert iof(a, (20, 20, 5, 5)) == 0.0
    assert iof(a, (5, 0, 10, 10)) == 0.5
    with pytest.raises(ValueError):
        iof((0, 0, 0, 5), a)


def test_pairwise_matches_scalar():
    rng = np.random.default_rng(0)
    a = np.abs(rng.normal(10, 6, size=(7, 4))) + 0.5
    b = np.abs(rng.normal(10, 6, size=(5, 4))) + 0.5
    m = pairwise("iou", a, b)
    f = pairwise("iof", a, b)
    for i in range(7):
        for j in range(5):
            assert abs(m[i, j] - brute_iou(a[i], b[j])) < 1e-12
            assert abs(m[i, j] - iou(a[i], b[j])) < 1e-12
            assert abs(f[i, j] - iof(a[i], b[j])) < 1e-12


# -- k-means ------------------------------------------------------------------

def test_kmeans_identical_boxes():
    assert kmeans_anchors([GtBox(0, 0, 8, 8)] * 10, 1) == [(8.0, 8.0)]


def test_kmeans_two_separated_clusters():
    boxes = [GtBox(0, 0, 4, 4)] * 50 + [GtBox(0, 0, 16, 16)] * 50
    assert kmeans_anchors(boxes, 2, seed=3) == [(4.0, 4.0), (16.0, 16.0)]


def test_kmeans_k_too_large():
    with pytest.raises(ValueError):
        kmeans_anchors([GtBox(0, 0, 4, 4)] * 2, 3)


@pytest.mark.parametrize("seed", range(20))
def test_kmeans_objective_non_increasing(seed):
    rng = np.random.default_rng(seed)
    wh = np.exp(rng.uniform(np.log(2), np.log(40), size=(120, 2)))
    _, _, history = kmeans_wh(wh, 4, seed)
    assert len(history) >= 1
    assert all(b <= a for a, b in zip(history, history[1:]))


def test_kmeans_deterministic():
    boxes = three_clusters(1)
    assert kmeans_anchors(boxes, 4, seed=7) == kmeans_anchors(boxes, 4, seed=7)


def test_kmeans_beats_ladder_on_three_clusters():
    boxes = three_clusters()
    wh = np.array([[b.w, b.h] for b in boxes])
    km = mean_best_iou(wh, kmeans_anchors(boxes, 4))
    ladder = mean_best_iou(wh, geometric_ladder())
    # oracle: the same mean computed with scalar co-centred IoUs
    direct = np.mean([max(brute_iou((0, 0, w, h), (0, 0, s, s)) for s in (4, 8, 16, 32)) for w, h in wh])
    assert abs(ladder - direct) < 1e-12
    assert km > ladder


def test_anchor_kmeans_estimator():
    wh = np.array([[b.w, b.h] for b in three_clusters()])
    est = AnchorKMeans(n_clusters=3, random_state=0).fit(wh)
    assert est.cluster_centers_.shape == (3, 2)
    areas = est.cluster_centers_.prod(axis=1)
    assert np.all(np.diff(areas) > 0)
    assert est.transform(wh).shape == (len(wh), 3)
    assert abs(est.score(wh) - mean_best_iou(wh, est.cluster_centers_)) < 1e-12
    assert np.array_equal(est.labels_, est.predict(wh))
    with pytest.raises(ValueError):
        AnchorKMeans().fit(np.array([[1.0, -1.0]] * 5))


# -- matching -----------------------------------------------------------------

def test_exact_anchor_is_positive():
    spec = AnchorSpec.from_shapes(geometric_ladder((8, 16, 32, 64)))
    # level-2 cell (1, 1) has its centre at (6, 6)
    out = match_anchors([GtBox(2, 2, 8, 8)], spec)
    assert out.iou_table[(0, 2)] == 1.0
    assert out.per_gt[0] == [2]
    assert out.per_level[2][0].cell == (1, 1) and out.per_level[2][0].matched


def test_tiny_box_misses_deep_anchor():
    spec = AnchorSpec.from_shapes(geometric_ladder((8, 16, 32, 64)))
    out = match_anchors([GtBox(14, 14, 4, 4)], spec)   # centred on the level-5 cell (0, 0)
    assert out.iou_table[(0, 5)] == 16 / 4096
    assert 5 not in out.per_gt[0]


def test_unmatched_gt_is_forced_to_best_level():
    spec = AnchorSpec.from_shapes(geometric_ladder())
    out = match_anchors([GtBox(0, 0, 3, 9)], spec)
    assert out.forced == {0}
    (entry,) = [e for es in out.per_level.values() for e in es]
    assert not entry.matched
    assert entry.iou == max(out.iou_table[(0, k)] for k in spec.levels())


def test_ignored_gts_are_skipped():
    spec = AnchorSpec.from_shapes(geometric_ladder())
    out = match_anchors([GtBox(0, 0, 4, 4, ignore=True)], spec)
    assert out.per_gt == {} and all(not v for v in out.per_level.values())


def test_bad_threshold():
    with pytest.raises(ValueError):
        match_anchors([], AnchorSpec.from_shapes(geometric_ladder()), 1.0)


box_strategy = st.tuples(st.floats(0, 100), st.floats(0, 100), st.floats(1, 40), st.floats(1, 40))


@settings(max_examples=200, deadline=None)
@given(st.lists(box_strategy, min_size=1, max_size=6), st.sampled_from([0.3, 0.4, 0.5]))
def test_positive_levels_contiguous(raw, thr):
    spec = AnchorSpec.from_shapes([(3.0, 6.0), (6.0, 12.0), (12.0, 24.0), (24.0, 48.0)])
    gts = [GtBox(*b) for b in raw]
    out = match_anchors(gts, spec, thr)
    for gi, gt in enumerate(gts):
        # brute-force table against anchors at the centre cell of each level
        table = {}
        for k in spec.levels():
            s = spec.strides[k]
            i, j = math.floor(gt.center[1] / s), math.floor(gt.center[0] / s)
            w, h = spec.anchors[k][0]
            table[k] = brute_iou(gt.as_tuple(), ((j + 0.5) * s - w / 2, (i + 0.5) * s - h / 2, w, h))
            assert abs(table[k] - out.iou_table[(gi, k)]) < 1e-12
        levels = out.per_gt[gi]
        assert levels                                    # every GT positive somewhere
        assert levels == list(range(levels[0], levels[-1] + 1))
        if gi not in out.forced:
            assert set(levels) == {k for k, v in table.items() if v >= thr}


# -- heatmaps -------------------------------------------------------------------

def test_heatmaps_empty():
    spec = AnchorSpec.from_shapes(geometric_ladder())
    maps = supervised_heatmaps(match_anchors([], spec), [], SHAPES, STRIDES)
    assert all(not m.any() for m in maps.values())


def test_heatmap_block_at_level_three():
    spec = AnchorSpec.from_shapes(geometric_ladder((3, 10, 40, 80)))
    gts = [GtBox(16, 24, 10, 10)]
    out = match_anchors(gts, spec)
    assert out.per_gt[0] == [3]
    maps = supervised_heatmaps(out, gts, SHAPES, STRIDES)
    assert maps[3].sum() == math.ceil(10 / 8) ** 2
    assert maps[3][3:5, 2:4].all()
    assert all(not maps[k].any() for k in (2, 4, 5))


def test_heatmap_union_of_disjoint_gts():
    spec = AnchorSpec.from_shapes(geometric_ladder((3, 10, 40, 80)))
    gts = [GtBox(16, 24, 10, 10), GtBox(40, 0, 10, 10)]
    maps = supervised_heatmaps(match_anchors(gts, spec), gts, SHAPES, STRIDES)
    single = [supervised_heatmaps(match_anchors([g], spec), [g], SHAPES, STRIDES)[3] for g in gts]
    np.testing.assert_array_equal(maps[3], np.maximum(*single))


@pytest.mark.parametrize("seed", range(10))
def test_heatmaps_match_rasterizer(seed):
    rng = np.random.default_rng(seed)
    spec = AnchorSpec.from_shapes([(3.0, 6.0), (6.0, 12.0), (12.0, 24.0), (24.0, 48.0)])
    gts = [GtBox(float(rng.uniform(0, 50)), float(rng.uniform(0, 50)), float(rng.uniform(1, 14)),
                 float(rng.uniform(1, 14))) for _ in range(6)]
    out = match_anchors(gts, spec)
    maps = supervised_heatmaps(out, gts, SHAPES, STRIDES)
    for k in spec.levels():
        want = rasterize(gts, [e.gt_index for e in out.per_level[k]], STRIDES[k], SHAPES[k])
        np.testing.assert_array_equal(maps[k], want)
        assert set(np.unique(maps[k])) <= {0.0, 1.0}


# -- scale partitions -------------------------------------------------------------

@pytest.mark.parametrize("scale,expected", [
    (8.0, {"tiny1", "tiny"}), (12.5, {"tiny3", "tiny"}), (1.0, set()), (2.0, {"tiny1", "tiny"}),
    (12.0, {"tiny2", "tiny"}), (20.0, {"tiny3", "tiny"}), (25.0, {"small"}), (32.5, set()),
])
def test_partition_examples(scale, expected):
    parts = partition_by_scale([GtBox(0, 0, scale, scale)])
    assert {name for name, idx in parts.items() if idx} == expected


def test_partitions_disjoint_and_covering():
    rng = np.random.default_rng(4)
    gts = [GtBox(0, 0, float(s), float(s)) for s in rng.uniform(2, 32, size=300)]
    parts = partition_by_scale(gts)
    fine = ["tiny1", "tiny2", "tiny3", "small"]
    seen = [i for name in fine for i in parts[name]]
    assert sorted(seen) == list(range(300))
    assert sorted(parts["tiny"]) == sorted(parts["tiny1"] + parts["tiny2"] + parts["tiny3"])
    assert set(SCALE_INTERVALS) == set(parts)
