"""AP / miss-rate evaluation over IoU thresholds and scale partitions."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .anchors import GtBox, in_partition, pairwise
from .errors import DataError

TP, FP, IGNORED = 1, 0, -1
DEFAULT_THRESHOLDS = (0.25, 0.5, 0.75)
DEFAULT_PARTITIONS = ("tiny", "tiny1", "tiny2", "tiny3", "small")


@dataclass
class Detection:
    image_id: int
    box: tuple[float, float, float, float]
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise DataError(f"detection score {self.score} outside [0, 1]")
        if self.box[2] <= 0 or self.box[3] <= 0:
            raise DataError(f"detection box {self.box} has no area")

    def to_json(self) -> dict:
        return {"image_id": self.image_id, "bbox": [float(v) for v in self.box], "score": float(self.score)}

    @classmethod
    def from_json(cls, rec: Mapping) -> "Detection":
        return cls(int(rec["image_id"]), tuple(float(v) for v in rec["bbox"]), float(rec["score"]))


def match_detections(dets: Sequence, gts: Sequence[GtBox], iou_thr: float):
    """Greedy one-to-one matching in the given (descending score) order.

    Returns ``(flags, gt_matched)``; flags are TP / FP / IGNORED. A detection
    whose best available partner is an ignore-flagged GT is IGNORED, and
    ignore GTs may absorb any number of detections.
    """
    boxes = np.array([d.box if isinstance(d, Detection) else d for d in dets], dtype=np.float64).reshape(-1, 4)
    gt_arr = np.array([g.as_tuple() for g in gts], dtype=np.float64).reshape(-1, 4)
    ignore = np.array([g.ignore for g in gts], dtype=bool)
    matched = np.zeros(len(gts), dtype=bool)
    flags = np.full(len(boxes), FP, dtype=np.int64)
    if len(gts) == 0 or len(boxes) == 0:
        return flags, matched
    ious = pairwise("iou", boxes, gt_arr)
    for i in range(len(boxes)):
        avail = ~ignore & ~matched
        if avail.any():
            cand = np.where(avail, ious[i], -1.0)
            j = int(cand.argmax())
            if cand[j] >= iou_thr:
                flags[i] = TP
                matched[j] = True
                continue
        if ignore.any() and ious[i][ignore].max() >= iou_thr:
            flags[i] = IGNORED
    return flags, matched


def average_precision(flags: Sequence[int], n_gt: int) -> float | None:
    """All-points interpolated AP; ``None`` when there is nothing to find."""
    if n_gt <= 0:
        return None
    f = np.asarray([v for v in flags if v != IGNORED], dtype=np.int64)
    if f.size == 0:
        return 0.0
    tp = np.cumsum(f == TP)
    fp = np.cumsum(f == FP)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[0.0], precision])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    step = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(((mrec[step + 1] - mrec[step]) * mpre[step + 1]).sum())


def miss_rate(flags: Sequence[int], n_gt: int) -> float | None:
    """Fraction of GTs left unmatched over all detections."""
    if n_gt <= 0:
        return None
    hits = int(sum(1 for v in flags if v == TP))
    return 1.0 - hits / n_gt


@dataclass
class MetricReport:
    entries: dict[tuple[float, str], dict] = field(default_factory=dict)

    def get(self, metric: str, iou_thr: float = 0.5, partition: str = "tiny"):
        return self.entries[(float(iou_thr), partition)][metric]

    def to_json(self) -> dict:
        rows = []
        for (thr, part), v in sorted(self.entries.items(), key=lambda kv: (kv[0][1], kv[0][0])):
            rows.append({"iou": thr, "partition": part, **v})
        return {"results": rows}

    @classmethod
    def from_json(cls, obj: Mapping) -> "MetricReport":
        entries = {}
        for row in obj["results"]:
            row = dict(row)
            key = (float(row.pop("iou")), row.pop("partition"))
            entries[key] = row
        return cls(entries)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    def table(self) -> str:
        lines = [f"{'partition':<10}{'iou':>6}{'n_gt':>7}{'AP':>9}{'MR':>9}"]
        for row in self.to_json()["results"]:
            ap = "-" if row["AP"] is None else f"{100 * row['AP']:.2f}"
            mr = "-" if row["MR"] is None else f"{100 * row['MR']:.2f}"
            lines.append(f"{row['partition']:<10}{row['iou']:>6.2f}{row['n_gt']:>7d}{ap:>9}{mr:>9}")
        return "\n".join(lines)


def _sorted_dets(dets: Iterable[Detection]) -> list[Detection]:
    dets = list(dets)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    return [dets[i] for i in order]


def evaluate(dets: Sequence[Detection], gts: Mapping[int, Sequence[GtBox]],
             thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
             partitions: Sequence[str] = DEFAULT_PARTITIONS) -> MetricReport:
    """AP and MR for every (threshold, partition) pair.

    GTs outside a partition are treated as ignore regions for that cell, so
    detections landing on them are neither TP nor FP.
    """
    by_image: dict[int, list[Detection]] = {i: [] for i in gts}
    for d in dets:
        if d.image_id not in by_image:
            raise DataError(f"detection refers to unknown image id {d.image_id}")
        by_image[d.image_id].append(d)
    report = MetricReport()
    for part in partitions:
        for thr in thresholds:
            scored: list[tuple[float, int, int, int]] = []
            n_gt = 0
            for img_pos, img in enumerate(sorted(gts)):
                boxes = []
                for g in gts[img]:
                    keep = not g.ignore and in_partition(g.scale, part)
                    boxes.append(GtBox(g.x, g.y, g.w, g.h, ignore=not keep))
                    n_gt += keep
                ds = _sorted_dets(by_image[img])
                flags, _ = match_detections(ds, boxes, thr)
                scored.extend((-d.score, img_pos, i, int(f)) for i, (d, f) in enumerate(zip(ds, flags)))
            scored.sort()
            flags = [s[3] for s in scored]
            report.entries[(float(thr), part)] = {
                "AP": average_precision(flags, n_gt),
                "MR": miss_rate(flags, n_gt),
                "n_gt": int(n_gt),
            }
    return report
