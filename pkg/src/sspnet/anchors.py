"""Boxes, k-means prior anchors, per-level matching and supervised heatmaps.

Boxes are ``(x, y, w, h)`` in pixels with a top-left origin throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .backbone import LEVELS

SCALE_INTERVALS = {
    "tiny1": (2.0, 8.0),
    "tiny2": (8.0, 12.0),
    "tiny3": (12.0, 20.0),
    "tiny": (2.0, 20.0),
    "small": (20.0, 32.0),
}


@dataclass(frozen=True)
class GtBox:
    x: float
    y: float
    w: float
    h: float
    ignore: bool = False

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box needs positive width and height, got {self.w}x{self.h}")

    @property
    def scale(self) -> float:
        return math.sqrt(self.w * self.h)

    @property
    def center(self) -> tuple[float, float]:
        return self.x + self.w / 2.0, self.y + self.h / 2.0

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)


def _xywh(b) -> tuple[float, float, float, float]:
    return b.as_tuple() if isinstance(b, GtBox) else tuple(float(v) for v in b)


def intersection(a, b) -> float:
    ax, ay, aw, ah = _xywh(a)
    bx, by, bw, bh = _xywh(b)
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    return max(0.0, iw) * max(0.0, ih)


def iou(a, b) -> float:
    inter = intersection(a, b)
    _, _, aw, ah = _xywh(a)
    _, _, bw, bh = _xywh(b)
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def iof(fg, other) -> float:
    """Fraction of the foreground box ``fg`` covered by ``other``."""
    _, _, w, h = _xywh(fg)
    if w * h <= 0:
        raise ValueError("iof: foreground box has zero area")
    return intersection(fg, other) / (w * h)


def pairwise(fn, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Vectorised IoU (``fn='iou'``) or IoF (``fn='iof'``, rows are foreground) matrix."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax1, ay1 = a[:, 0:1], a[:, 1:2]
    ax2, ay2 = ax1 + a[:, 2:3], ay1 + a[:, 3:4]
    bx1, by1 = b[:, 0], b[:, 1]
    bx2, by2 = bx1 + b[:, 2], by1 + b[:, 3]
    iw = np.clip(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0, None)
    ih = np.clip(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0, None)
    inter = iw * ih
    area_a = (a[:, 2] * a[:, 3])[:, None]
    if fn == "iof":
        return inter / area_a
    union = area_a + (b[:, 2] * b[:, 3])[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


# -- k-means prior anchors ---------------------------------------------------

def wh_iou(wh: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """IoU of co-centred boxes, shape (n_boxes, n_centroids)."""
    inter = np.minimum(wh[:, None, 0], centroids[None, :, 0]) * np.minimum(wh[:, None, 1], centroids[None, :, 1])
    area = wh[:, 0:1] * wh[:, 1:2]
    carea = (centroids[:, 0] * centroids[:, 1])[None, :]
    return inter / (area + carea - inter)


def mean_best_iou(wh, anchors) -> float:
    wh = np.asarray(wh, dtype=np.float64).reshape(-1, 2)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 2)
    return float(wh_iou(wh, anchors).max(axis=1).mean())


def _plusplus_init(wh: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centroids = [wh[rng.integers(len(wh))]]
    for _ in range(1, k):
        d = 1.0 - wh_iou(wh, np.array(centroids)).max(axis=1)
        total = d.sum()
        if total <= 0:
            centroids.append(wh[rng.integers(len(wh))])
            continue
        centroids.append(wh[rng.choice(len(wh), p=d / total)])
    return np.array(centroids, dtype=np.float64)


def kmeans_wh(wh: np.ndarray, k: int, seed: int = 0, max_iter: int = 300):
    """Lloyd iterations under the ``1 - IoU`` distance.

    Returns ``(centroids, labels, history)`` where ``history[t]`` is the
    objective ``sum(1 - best IoU)`` after iteration ``t``. A cluster's mean
    update is kept only if it does not raise that cluster's cost, so the
    history never increases.
    """
    wh = np.asarray(wh, dtype=np.float64).reshape(-1, 2)
    if k < 1 or k > len(wh):
        raise ValueError(f"k={k} must lie in [1, {len(wh)}]")
    rng = np.random.Generator(np.random.PCG64(seed))
    centroids = _plusplus_init(wh, k, rng)
    labels = None
    history: list[float] = []
    for _ in range(max_iter):
        dist = 1.0 - wh_iou(wh, centroids)
        new_labels = dist.argmin(axis=1)
        history.append(float(dist[np.arange(len(wh)), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = wh[labels == j]
            if len(members) == 0:
                continue
            proposal = members.mean(axis=0)
            old_cost = (1.0 - wh_iou(members, centroids[j:j + 1])).sum()
            new_cost = (1.0 - wh_iou(members, proposal[None])).sum()
            if new_cost <= old_cost:
                centroids[j] = proposal
    dist = 1.0 - wh_iou(wh, centroids)
    labels = dist.argmin(axis=1)
    return centroids, labels, history


def kmeans_anchors(boxes: Sequence, k: int, seed: int = 0, max_iter: int = 300) -> list[tuple[float, float]]:
    """Cluster box shapes into ``k`` anchors, sorted by area."""
    wh = np.array([[_xywh(b)[2], _xywh(b)[3]] for b in boxes], dtype=np.float64)
    centroids, _, _ = kmeans_wh(wh, k, seed, max_iter)
    order = np.argsort(centroids[:, 0] * centroids[:, 1], kind="stable")
    return [(float(w), float(h)) for w, h in centroids[order]]


class AnchorKMeans(ClusterMixin, TransformerMixin, BaseEstimator):
    """Estimator wrapper: fit on ``(n, 2)`` widths/heights, transform to 1-IoU distances."""

    def __init__(self, n_clusters: int = 4, max_iter: int = 300, random_state: int = 0):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != 2 or (X <= 0).any():
            raise ValueError("expected positive (width, height) rows")
        centroids, _, history = kmeans_wh(X, self.n_clusters, self.random_state, self.max_iter)
        order = np.argsort(centroids[:, 0] * centroids[:, 1], kind="stable")
        self.cluster_centers_ = centroids[order]
        self.labels_ = self.predict(X)
        self.objective_history_ = history
        self.n_iter_ = len(history)
        return self

    def transform(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X, dtype=np.float64)
        return 1.0 - wh_iou(X, self.cluster_centers_)

    def predict(self, X):
        return self.transform(X).argmin(axis=1)

    def score(self, X, y=None):
        """Mean best IoU between each box and its nearest anchor."""
        return float(1.0 - self.transform(X).min(axis=1).mean())


def geometric_ladder(sizes: Iterable[float] = (4, 8, 16, 32)) -> list[tuple[float, float]]:
    return [(float(s), float(s)) for s in sizes]


# -- matching ---------------------------------------------------------------

@dataclass
class AnchorSpec:
    anchors: dict[int, list[tuple[float, float]]]
    strides: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.strides:
            self.strides = {k: 2 ** k for k in self.anchors}
        for k, shapes in self.anchors.items():
            if not shapes or any(w <= 0 or h <= 0 for w, h in shapes):
                raise ValueError(f"level {k} needs positive anchor shapes")

    @classmethod
    def from_shapes(cls, shapes: Sequence[tuple[float, float]], levels: Sequence[int] = LEVELS) -> "AnchorSpec":
        """One anchor per level, smallest on the finest level."""
        if len(shapes) != len(levels):
            raise ValueError(f"{len(shapes)} anchor shapes for {len(levels)} levels")
        ordered = sorted(shapes, key=lambda s: s[0] * s[1])
        return cls({k: [tuple(map(float, s))] for k, s in zip(levels, ordered)})

    def levels(self) -> list[int]:
        return sorted(self.anchors)

    def anchor_box(self, level: int, a: int, cell: tuple[int, int]) -> tuple[float, float, float, float]:
        s = self.strides[level]
        w, h = self.anchors[level][a]
        cx, cy = (cell[1] + 0.5) * s, (cell[0] + 0.5) * s
        return (cx - w / 2.0, cy - h / 2.0, w, h)


@dataclass
class Assignment:
    gt_index: int
    level: int
    cell: tuple[int, int]
    anchor: int
    iou: float
    matched: bool  # False when force-assigned


@dataclass
class LayerAssignment:
    per_level: dict[int, list[Assignment]]
    per_gt: dict[int, list[int]]
    forced: set[int]
    iou_table: dict[tuple[int, int], float]


def center_cell(gt, stride: int) -> tuple[int, int]:
    cx, cy = (gt.center if isinstance(gt, GtBox) else GtBox(*_xywh(gt)).center)
    return int(math.floor(cy / stride)), int(math.floor(cx / stride))


def match_anchors(gts: Sequence[GtBox], spec: AnchorSpec, pos_thr: float = 0.5) -> LayerAssignment:
    """Centre-cell anchor matching; unmatched GTs go to their best level."""
    if not 0.0 < pos_thr < 1.0:
        raise ValueError(f"pos_thr must be in (0, 1), got {pos_thr}")
    per_level: dict[int, list[Assignment]] = {k: [] for k in spec.levels()}
    per_gt: dict[int, list[int]] = {}
    forced: set[int] = set()
    table: dict[tuple[int, int], float] = {}
    for gi, gt in enumerate(gts):
        if gt.ignore:
            continue
        best: Assignment | None = None
        hits = []
        for k in spec.levels():
            cell = center_cell(gt, spec.strides[k])
            ious = [iou(gt, spec.anchor_box(k, a, cell)) for a in range(len(spec.anchors[k]))]
            a = int(np.argmax(ious))
            table[(gi, k)] = ious[a]
            cand = Assignment(gi, k, cell, a, ious[a], True)
            if ious[a] >= pos_thr:
                hits.append(cand)
            if best is None or cand.iou > best.iou:
                best = cand
        if not hits:
            best.matched = False
            hits = [best]
            forced.add(gi)
        for h in hits:
            per_level[h.level].append(h)
        per_gt[gi] = [h.level for h in hits]
    return LayerAssignment(per_level, per_gt, forced, table)


def gt_rect_cells(gt, stride: int, shape: tuple[int, int]) -> tuple[int, int, int, int]:
    """Half-open cell range ``(r0, r1, c0, c1)`` covered by ``gt`` at ``stride``."""
    x, y, w, h = _xywh(gt)
    r0 = max(0, int(math.floor(y / stride)))
    c0 = max(0, int(math.floor(x / stride)))
    r1 = min(shape[0], int(math.ceil((y + h) / stride)))
    c1 = min(shape[1], int(math.ceil((x + w) / stride)))
    return r0, r1, c0, c1


def supervised_heatmaps(assign: LayerAssignment, gts: Sequence[GtBox],
                        shapes: dict[int, tuple[int, int]], strides: dict[int, int]) -> dict[int, np.ndarray]:
    """Binary per-level masks of the GT rectangles positive at each level."""
    maps = {}
    for k, (h, w) in shapes.items():
        m = np.zeros((h, w))
        for entry in assign.per_level.get(k, []):
            r0, r1, c0, c1 = gt_rect_cells(gts[entry.gt_index], strides[k], (h, w))
            m[r0:r1, c0:c1] = 1.0
        maps[k] = m
    return maps


def partition_by_scale(gts: Sequence) -> dict[str, list[int]]:
    """Indices per scale interval; a shared endpoint belongs to the lower interval."""
    out: dict[str, list[int]] = {name: [] for name in SCALE_INTERVALS}
    for i, g in enumerate(gts):
        s = g.scale if isinstance(g, GtBox) else math.sqrt(_xywh(g)[2] * _xywh(g)[3])
        for name in out:
            if in_partition(s, name):
                out[name].append(i)
    return out


def in_partition(scale: float, name: str) -> bool:
    if name == "all":
        return True
    lo, hi = SCALE_INTERVALS[name]
    if name in ("tiny1", "tiny"):
        return lo <= scale <= hi
    return lo < scale <= hi
