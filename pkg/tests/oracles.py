"""Independent brute-force references used by the test-suite."""

import numpy as np


def loop_conv2d(x, w, b, stride=1, dilation=1, padding=0):
    """Direct nested-loop cross-correlation used as an independent oracle."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else b[oc]
                    for ic in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += w[oc, ic, u, v] * xp[bi, ic, i * stride + u * dilation, j * stride + v * dilation]
                    out[bi, oc, i, j] = acc
    return out


def rasterize(gts, level_boxes, stride, shape):
    """Cell-by-cell rasterizer: a cell is on if its square overlaps a GT rectangle."""
    m = np.zeros(shape)
    for gi in level_boxes:
        x, y, w, h = gts[gi].as_tuple()
        for i in range(shape[0]):
            for j in range(shape[1]):
                cx0, cy0 = j * stride, i * stride
                if cx0 < x + w and cx0 + stride > x and cy0 < y + h and cy0 + stride > y:
                    m[i, j] = 1.0
    return m


def brute_iou(a, b):
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def brute_match(boxes, gts, thr):
    """Loop-only greedy matcher: (flags, matched) with flags 1=TP, 0=FP, -1=ignored."""
    matched = [False] * len(gts)
    flags = []
    for b in boxes:
        best, best_j = -1.0, None
        for j, g in enumerate(gts):
            if g.ignore or matched[j]:
                continue
            v = brute_iou(b, g.as_tuple())
            if v > best:
                best, best_j = v, j
        if best_j is not None and best >= thr:
            matched[best_j] = True
            flags.append(1)
            continue
        ign = [brute_iou(b, g.as_tuple()) for g in gts if g.ignore]
        flags.append(-1 if ign and max(ign) >= thr else 0)
    return flags, matched


def brute_ap(flags, n_gt):
    """Precision envelope AP: sum over recall steps of max precision at recall >= r."""
    if n_gt == 0:
        return None
    flags = [f for f in flags if f != -1]
    points = []
    tp = fp = 0
    for f in flags:
        tp += f == 1
        fp += f == 0
        points.append((tp / n_gt, tp / (tp + fp)))
    ap, prev = 0.0, 0.0
    for r, _ in points:
        if r > prev:
            ap += (r - prev) * max(p for rr, p in points if rr >= r)
            prev = r
    return ap


def brute_evaluate(dets, gts, thresholds, partitions, in_partition):
    from sspnet.anchors import GtBox
    out = {}
    for part in partitions:
        for thr in thresholds:
            rows, n_gt = [], 0
            for pos, img in enumerate(sorted(gts)):
                boxes = [GtBox(g.x, g.y, g.w, g.h, ignore=g.ignore or not in_partition(g.scale, part))
                         for g in gts[img]]
                n_gt += sum(not b.ignore for b in boxes)
                mine = sorted([d for d in dets if d.image_id == img], key=lambda d: -d.score)
                flags, _ = brute_match([d.box for d in mine], boxes, thr)
                rows += [(-d.score, pos, i, f) for i, (d, f) in enumerate(zip(mine, flags))]
            flags = [r[3] for r in sorted(rows)]
            hits = sum(1 for f in flags if f == 1)
            out[(thr, part)] = {"AP": brute_ap(flags, n_gt), "MR": None if n_gt == 0 else 1.0 - hits / n_gt,
                                "n_gt": n_gt}
    return out
