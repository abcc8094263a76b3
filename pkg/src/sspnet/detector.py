"""Toy two-stage detector on top of the pyramid, exposed as an estimator.

Stage one is a dense objectness/box head with one anchor per level. Stage
two samples each RoI on a 3x3 grid from the level whose anchor fits it
best and classifies person vs background. Head negatives are drawn by
weighted negative sampling.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from .anchors import AnchorSpec, GtBox, geometric_ladder, kmeans_anchors, match_anchors, pairwise, supervised_heatmaps, wh_iou
from .backbone import LEVELS, conv_param, init_backbone
from .cam import DEFAULT_RATES, init_cam
from .errors import CheckpointError, DataError
from .losses import DetectionTargets, LossWeights, attention_loss, detection_losses, joint_loss
from .metrics import Detection, MetricReport, evaluate
from .neck import init_neck, sspnet_forward
from .rng import Streams
from .tensor import Tensor, load_tensor, save_tensor
from .wns import candidate_pool, wns_sample, wns_scores

logger = logging.getLogger(__name__)

BBOX_CLIP = math.log(1000.0 / 16)
ROI_GRID = 3


# -- box utilities -----------------------------------------------------------

def anchor_grid(spec: AnchorSpec, image_size: tuple[int, int]):
    """All anchors as ``(boxes, level, cell)`` arrays, levels ascending, cells row-major."""
    boxes, levels, cells = [], [], []
    h, w = image_size
    for k in spec.levels():
        s = spec.strides[k]
        for a in range(len(spec.anchors[k])):
            for i in range(h // s):
                for j in range(w // s):
                    boxes.append(spec.anchor_box(k, a, (i, j)))
                    levels.append(k)
                    cells.append((i, j))
    return np.array(boxes, dtype=np.float64), np.array(levels), np.array(cells)


def encode(gt: np.ndarray, ref: np.ndarray) -> np.ndarray:
    gx, gy = gt[:, 0] + gt[:, 2] / 2, gt[:, 1] + gt[:, 3] / 2
    rx, ry = ref[:, 0] + ref[:, 2] / 2, ref[:, 1] + ref[:, 3] / 2
    return np.stack([(gx - rx) / ref[:, 2], (gy - ry) / ref[:, 3],
                     np.log(gt[:, 2] / ref[:, 2]), np.log(gt[:, 3] / ref[:, 3])], axis=1)


def decode(deltas: np.ndarray, ref: np.ndarray) -> np.ndarray:
    rx, ry = ref[:, 0] + ref[:, 2] / 2, ref[:, 1] + ref[:, 3] / 2
    cx = rx + deltas[:, 0] * ref[:, 2]
    cy = ry + deltas[:, 1] * ref[:, 3]
    w = ref[:, 2] * np.exp(np.clip(deltas[:, 2], -BBOX_CLIP, BBOX_CLIP))
    h = ref[:, 3] * np.exp(np.clip(deltas[:, 3], -BBOX_CLIP, BBOX_CLIP))
    return np.stack([cx - w / 2, cy - h / 2, w, h], axis=1)


def clip_boxes(boxes: np.ndarray, size: tuple[int, int], min_size: float = 1.0) -> np.ndarray:
    h, w = size
    x1 = np.clip(boxes[:, 0], 0, w)
    y1 = np.clip(boxes[:, 1], 0, h)
    x2 = np.clip(boxes[:, 0] + boxes[:, 2], 0, w)
    y2 = np.clip(boxes[:, 1] + boxes[:, 3], 0, h)
    out = np.stack([x1, y1, np.maximum(x2 - x1, min_size), np.maximum(y2 - y1, min_size)], axis=1)
    return out


def nms(boxes: np.ndarray, scores: np.ndarray, thr: float) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending score order (ties by index)."""
    order = np.lexsort((np.arange(len(scores)), -scores))
    keep = []
    suppressed = np.zeros(len(scores), dtype=bool)
    ious = pairwise("iou", boxes, boxes)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > thr
    return np.array(keep, dtype=np.int64)


def roi_levels(rois: np.ndarray, spec: AnchorSpec) -> np.ndarray:
    """Level whose anchor best fits each RoI shape (co-centred IoU)."""
    ks = spec.levels()
    shapes = np.array([spec.anchors[k][0] for k in ks], dtype=np.float64)
    return np.array(ks)[wh_iou(rois[:, 2:4], shapes).argmax(axis=1)]


# -- network pieces ----------------------------------------------------------

def init_heads(rng: np.random.Generator, channels: int, hidden: int = 16, rpn_hidden: int = 16) -> dict[str, Tensor]:
    params = conv_param(rng, rpn_hidden, channels, 3, "rpn.conv")
    obj = conv_param(rng, 1, rpn_hidden, 1, "rpn.obj")
    obj["rpn.obj.w"].data *= 0.1
    obj["rpn.obj.b"].data[:] = -2.0
    params.update(obj)
    reg = conv_param(rng, 4, rpn_hidden, 1, "rpn.reg")
    reg["rpn.reg.w"].data *= 0.1
    params.update(reg)
    fan_in = channels * ROI_GRID * ROI_GRID
    fc = np.vstack([rng.normal(0, math.sqrt(2.0 / fan_in), (fan_in, hidden)), np.zeros((1, hidden))])
    cls = np.vstack([rng.normal(0, 0.01, (hidden, 2)), np.zeros((1, 2))])
    box = np.vstack([rng.normal(0, 0.001, (hidden, 4)), np.zeros((1, 4))])
    params["head.fc"] = Tensor(fc, requires_grad=True)
    params["head.cls"] = Tensor(cls, requires_grad=True)
    params["head.reg"] = Tensor(box, requires_grad=True)
    return params


def _with_bias(x: Tensor) -> Tensor:
    return T.concat([x, Tensor(np.ones((x.shape[0], 1)))], axis=1)


def rpn_head(outputs: dict[int, Tensor], params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Objectness logits (n,) and box deltas (n, 4) over the anchor grid order."""
    logits, deltas = [], []
    for k in sorted(outputs):
        h = T.relu(T.conv2d(outputs[k], params["rpn.conv.w"], params["rpn.conv.b"], padding=1))
        obj = T.conv2d(h, params["rpn.obj.w"], params["rpn.obj.b"])
        reg = T.conv2d(h, params["rpn.reg.w"], params["rpn.reg.b"])
        n = obj.shape[2] * obj.shape[3]
        logits.append(T.reshape(obj, (n,)))
        deltas.append(T.transpose(T.reshape(reg, (4, n)), (1, 0)))
    return T.concat(logits, axis=0), T.concat(deltas, axis=0)


def roi_sample_cells(rois: np.ndarray, stride: int, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Nearest cells of a 3x3 grid of sample points inside each RoI."""
    u = (np.arange(ROI_GRID) + 0.5) / ROI_GRID
    px = rois[:, 0:1, None] + rois[:, 2:3, None] * u[None, None, :]      # (m, 1, g)
    py = rois[:, 1:2, None] + rois[:, 3:4, None] * u[None, :, None]      # (m, g, 1)
    px, py = np.broadcast_arrays(px, py)
    cols = np.clip(np.floor(px / stride), 0, shape[1] - 1).astype(np.int64).reshape(len(rois), -1)
    rows = np.clip(np.floor(py / stride), 0, shape[0] - 1).astype(np.int64).reshape(len(rois), -1)
    return rows, cols


def roi_head(outputs: dict[int, Tensor], rois: np.ndarray, levels: np.ndarray,
             params: dict[str, Tensor], strides: dict[int, int]) -> tuple[Tensor, Tensor]:
    groups, order = [], []
    for k in sorted(outputs):
        idx = np.flatnonzero(levels == k)
        if not idx.size:
            continue
        fmap = outputs[k]
        rows, cols = roi_sample_cells(rois[idx], strides[k], fmap.shape[2:])
        feat = T.index(fmap, (0, slice(None), rows, cols))             # (m_k, g*g, C)
        groups.append(T.reshape(feat, (idx.size, -1)))
        order.append(idx)
    feats = T.concat(groups, axis=0) if len(groups) > 1 else groups[0]
    perm = np.argsort(np.concatenate(order), kind="stable")
    feats = T.index(feats, perm)
    hidden = T.relu(T.matmul(_with_bias(feats), params["head.fc"]))
    hb = _with_bias(hidden)
    return T.matmul(hb, params["head.cls"]), T.matmul(hb, params["head.reg"])


# -- per-image training targets -----------------------------------------------

@dataclass
class ImageTargets:
    gt: np.ndarray                 # (g, 4), ignore boxes removed
    rpn_labels: np.ndarray         # (n,) 1 / 0 / -1 (ignored)
    rpn_reg: np.ndarray            # (n, 4)
    heatmaps: dict[int, np.ndarray]


def build_targets(gts: Sequence[GtBox], spec: AnchorSpec, grid, image_size, pos_thr: float,
                  neg_iou: float = 0.3) -> ImageTargets:
    boxes, levels, cells = grid
    keep = [g for g in gts if not g.ignore]
    gt = np.array([g.as_tuple() for g in keep], dtype=np.float64).reshape(-1, 4)
    labels = np.zeros(len(boxes), dtype=np.int64)
    reg = np.zeros((len(boxes), 4))
    shapes = {k: (image_size[0] // spec.strides[k], image_size[1] // spec.strides[k]) for k in spec.levels()}
    if len(gt):
        ious = pairwise("iou", boxes, gt)
        labels[(ious.max(axis=1) >= neg_iou)] = -1
        offsets, start = {}, 0
        for k in spec.levels():
            offsets[k] = start
            start += shapes[k][0] * shapes[k][1]
        assign = match_anchors(keep, spec, pos_thr)
        for k, entries in assign.per_level.items():
            for e in entries:
                i, j = e.cell
                if not (0 <= i < shapes[k][0] and 0 <= j < shapes[k][1]):
                    continue
                n = offsets[k] + i * shapes[k][1] + j
                labels[n] = 1
                reg[n] = encode(gt[e.gt_index:e.gt_index + 1], boxes[n:n + 1])[0]
        heat = supervised_heatmaps(assign, keep, shapes, spec.strides)
    else:
        heat = {k: np.zeros(s) for k, s in shapes.items()}
    return ImageTargets(gt, labels, reg, heat)


# -- estimator ---------------------------------------------------------------

def check_images(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise DataError(f"expected (n, H, W) grayscale images, got shape {X.shape}")
    if X.shape[1] % 32 or X.shape[2] % 32:
        raise DataError(f"image size {X.shape[1:]} must be divisible by 32")
    if not np.isfinite(X).all():
        raise DataError("images contain non-finite values")
    return X


class SSPNetDetector(BaseEstimator):
    """Two-stage toy detector with either the SSPNet or the plain FPN neck."""

    def __init__(self, neck="sspnet", channels=4, width=4, aspp_rates=DEFAULT_RATES, gate_bias=2.0,
                 kmeans_anchors=True, pos_thr=0.5, alpha=0.01, beta=1.0, mu1=1.0, mu2=1.0, wns_lambda=0.6, lr=0.002,
                 momentum=0.9, weight_decay=1e-4, epochs=10, decay_epoch=8, decay_factor=0.1,
                 grad_clip=10.0, train_proposals=48, test_proposals=32, score_thr=0.05, nms_iou=0.5,
                 seed=0):
        self.neck = neck
        self.channels = channels
        self.width = width
        self.aspp_rates = aspp_rates
        self.gate_bias = gate_bias
        self.kmeans_anchors = kmeans_anchors
        self.pos_thr = pos_thr
        self.alpha = alpha
        self.beta = beta
        self.mu1 = mu1
        self.mu2 = mu2
        self.wns_lambda = wns_lambda
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.decay_epoch = decay_epoch
        self.decay_factor = decay_factor
        self.grad_clip = grad_clip
        self.train_proposals = train_proposals
        self.test_proposals = test_proposals
        self.score_thr = score_thr
        self.nms_iou = nms_iou
        self.seed = seed

    # -- setup ------------------------------------------------------------
    def _weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.mu1, self.mu2)

    def init_params(self) -> dict[str, Tensor]:
        rng = Streams(self.seed).generator("params")
        params = init_backbone(rng, 1, self.width, self.channels)
        # open gates (A near 1) start the network close to the plain top-down merge
        params.update(init_cam(rng, self.channels * len(LEVELS), self.channels, tuple(self.aspp_rates),
                               gate_bias=self.gate_bias))
        params.update(init_neck(rng, self.channels))
        params.update(init_heads(rng, self.channels))
        return params

    def _anchor_spec(self, annotations) -> AnchorSpec:
        boxes = [g for gts in annotations for g in gts if not g.ignore]
        if self.kmeans_anchors and len(boxes) >= len(LEVELS):
            shapes = kmeans_anchors(boxes, len(LEVELS), seed=Streams(self.seed).seed_for("anchors"))
        else:
            shapes = geometric_ladder()
        return AnchorSpec.from_shapes(shapes, LEVELS)

    # -- forward ----------------------------------------------------------
    def _forward(self, img: np.ndarray):
        x = Tensor(((img - 0.35) / 0.2).reshape(1, 1, *img.shape))
        out = sspnet_forward(x, self.params_, self.neck, tuple(self.aspp_rates))
        logits, deltas = rpn_head(out.outputs.levels, self.params_)
        return out, logits, deltas

    def _proposals(self, logits: np.ndarray, deltas: np.ndarray, size, k: int):
        boxes = clip_boxes(decode(deltas, self.grid_[0]), size)
        scores = 0.5 * (1.0 + np.tanh(0.5 * logits))  # overflow-free sigmoid
        keep = nms(boxes, scores, 0.7)[:k]
        return boxes[keep], scores[keep]

    # -- training ---------------------------------------------------------
    def fit(self, X, y, callback=None):
        """Train on grayscale images ``X`` (n, H, W) with GT box lists ``y``."""
        X = check_images(X)
        if len(y) != len(X):
            raise DataError(f"{len(X)} images but {len(y)} annotation lists")
        self.image_size_ = X.shape[1:]
        self.anchor_spec_ = self._anchor_spec(y)
        self.grid_ = anchor_grid(self.anchor_spec_, self.image_size_)
        self.params_ = self.init_params()
        self.history_ = []
        targets = [build_targets(g, self.anchor_spec_, self.grid_, self.image_size_, self.pos_thr) for g in y]
        streams = Streams(self.seed)
        order_rng = streams.generator("order")
        sample_rng = streams.generator("sampling")
        velocity = {k: np.zeros_like(p.data) for k, p in self.params_.items()}
        step = 0
        for epoch in range(self.epochs):
            lr = self.lr * (self.decay_factor if epoch >= self.decay_epoch else 1.0)
            for i in order_rng.permutation(len(X)):
                total, parts = self._loss(X[i], targets[i], sample_rng)
                if not np.isfinite(total.data).all():
                    self._abort(step, parts)
                grads = T.grad(total, list(self.params_.values()))
                norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
                scale = min(1.0, self.grad_clip / norm) if norm > 0 else 1.0
                for (name, p), g in zip(self.params_.items(), grads):
                    v = velocity[name]
                    v *= self.momentum
                    v += scale * g + self.weight_decay * p.data
                    p.data = p.data - lr * v
                rec = {"epoch": epoch, "step": step, "loss": float(total.data), **{k: float(v.data) for k, v in parts.items()}}
                self.history_.append(rec)
                step += 1
            logger.info("epoch %d mean loss %.4f", epoch,
                        np.mean([r["loss"] for r in self.history_ if r["epoch"] == epoch]))
            if callback is not None:
                callback(self, epoch)
        self.epochs_trained_ = self.epochs
        return self

    def _abort(self, step: int, parts: dict[str, Tensor]):
        bad = [n for n, p in self.params_.items() if not np.isfinite(p.data).all()]
        terms = {k: float(v.data) for k, v in parts.items()}
        raise FloatingPointError(f"non-finite loss at step {step}: terms={terms}, non-finite params={bad}")

    def _loss(self, img: np.ndarray, tg: ImageTargets, rng: np.random.Generator):
        out, logits, deltas = self._forward(img)
        # stage one: all positives plus up to 3x as many random negatives
        pos = np.flatnonzero(tg.rpn_labels == 1)
        neg = np.flatnonzero(tg.rpn_labels == 0)
        n_neg = min(len(neg), max(3 * len(pos), 16))
        neg = np.sort(rng.choice(neg, n_neg, replace=False)) if n_neg else neg[:0]
        rpn_idx = np.concatenate([pos, neg])
        rpn_lab = (tg.rpn_labels[rpn_idx] == 1).astype(np.float64)

        # stage two
        props, obj = self._proposals(logits.data, deltas.data, self.image_size_, self.train_proposals)
        rois = np.concatenate([props, tg.gt]) if len(tg.gt) else props

        if len(tg.gt):
            ious = pairwise("iou", rois, tg.gt)
            best = ious.argmax(axis=1)
            head_pos = np.flatnonzero(ious.max(axis=1) >= 0.5)
        else:
            best = np.zeros(len(rois), dtype=np.int64)
            head_pos = np.zeros(0, dtype=np.int64)
        pool_idx, feats = candidate_pool(props, obj, tg.gt)
        n_neg = min(len(pool_idx), max(3 * len(head_pos), 8))
        if n_neg:
            s = wns_scores(feats, self.wns_lambda)
            head_neg = pool_idx[np.array(wns_sample(s, n_neg, rng), dtype=np.int64)]
        else:
            head_neg = np.zeros(0, dtype=np.int64)
        sel = np.concatenate([head_pos, head_neg])
        head_lab = np.concatenate([np.ones(len(head_pos)), np.zeros(len(head_neg))])
        head_reg_t = np.zeros((len(sel), 4))
        if len(head_pos):
            head_reg_t[:len(head_pos)] = encode(tg.gt[best[head_pos]], rois[head_pos])
        sel_rois = rois[sel]
        if len(sel):
            cls, reg = roi_head(out.outputs.levels, sel_rois, roi_levels(sel_rois, self.anchor_spec_),
                                self.params_, out.outputs.strides)
        else:
            cls, reg = Tensor(np.zeros((0, 2))), Tensor(np.zeros((0, 4)))
        dt = DetectionTargets(rpn_lab, tg.rpn_reg[rpn_idx], head_lab, head_reg_t)
        l_rpn, l_head = detection_losses(T.index(logits, rpn_idx), T.index(deltas, rpn_idx), cls, reg,
                                         dt, self._weights())
        if out.attention is not None:
            att = {k: T.reshape(a, a.shape[2:]) for k, a in out.attention.maps.items()}
            l_att = attention_loss(att, tg.heatmaps, self._weights())
        else:
            l_att = Tensor(0.0)
        total = joint_loss(l_rpn, l_head, l_att)
        return total, {"rpn": l_rpn, "head": l_head, "attention": l_att}

    # -- inference --------------------------------------------------------
    def predict_image(self, img: np.ndarray, image_id: int = 0) -> list[Detection]:
        out, logits, deltas = self._forward(img)
        props, obj = self._proposals(logits.data, deltas.data, self.image_size_, self.test_proposals)
        if not len(props):
            return []
        cls, reg = roi_head(out.outputs.levels, props, roi_levels(props, self.anchor_spec_),
                            self.params_, out.outputs.strides)
        z = cls.data
        # both stages vote: objectness times the head's person probability
        score = obj / (1.0 + np.exp(z[:, 0] - z[:, 1]))
        boxes = clip_boxes(decode(reg.data, props), self.image_size_, min_size=0.5)
        keep = nms(boxes, score, self.nms_iou)
        keep = keep[score[keep] >= self.score_thr]
        return [Detection(image_id, tuple(float(v) for v in boxes[i]), float(score[i])) for i in keep]

    def predict(self, X, ids: Sequence[int] | None = None) -> list[list[Detection]]:
        check_is_fitted(self, "params_")
        X = check_images(X)
        ids = list(range(len(X))) if ids is None else list(ids)
        return [self.predict_image(img, i) for img, i in zip(X, ids)]

    def evaluate(self, X, y, ids: Sequence[int] | None = None) -> MetricReport:
        ids = list(range(len(X))) if ids is None else list(ids)
        if len(X) == 0:
            return MetricReport()
        dets = [d for per in self.predict(X, ids) for d in per]
        return evaluate(dets, dict(zip(ids, y)))

    def score(self, X, y) -> float:
        """AP at IoU 0.5 over the tiny partition."""
        ap = self.evaluate(X, y).get("AP", 0.5, "tiny")
        return 0.0 if ap is None else ap

    # -- persistence ------------------------------------------------------
    def save(self, directory) -> Path:
        check_is_fitted(self, "params_")
        d = Path(directory)
        (d / "tensors").mkdir(parents=True, exist_ok=True)
        entries = []
        for name, p in sorted(self.params_.items()):
            fname = f"tensors/{name}.sspt"
            save_tensor(p, d / fname)
            entries.append({"name": name, "file": fname, "shape": list(p.shape)})
        manifest = {
            "format": "sspnet-checkpoint",
            "version": 1,
            "epoch": int(getattr(self, "epochs_trained_", 0)),
            "config": _jsonable(self.get_params()),
            "image_size": list(self.image_size_),
            "anchors": {str(k): [list(s) for s in v] for k, v in self.anchor_spec_.anchors.items()},
            "tensors": entries,
        }
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return d

    @classmethod
    def load(cls, directory) -> "SSPNetDetector":
        d = Path(directory)
        try:
            manifest = json.loads((d / "manifest.json").read_text())
        except (OSError, ValueError) as exc:
            raise CheckpointError(f"cannot read manifest in {d}: {exc}") from exc
        try:
            cfg = dict(manifest["config"])
            cfg["aspp_rates"] = tuple(cfg.get("aspp_rates", DEFAULT_RATES))
            model = cls(**cfg)
            image_size = tuple(int(v) for v in manifest["image_size"])
            anchors = {int(k): [tuple(s) for s in v] for k, v in manifest["anchors"].items()}
            entries = manifest["tensors"]
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"malformed manifest in {d}: {exc}") from exc
        model.image_size_ = image_size
        model.anchor_spec_ = AnchorSpec(anchors)
        model.grid_ = anchor_grid(model.anchor_spec_, model.image_size_)
        expected = model.init_params()
        files = {e["name"]: e for e in entries}
        if set(files) != set(expected):
            missing = sorted(set(expected) ^ set(files))
            raise CheckpointError(f"checkpoint tensors do not match the model: {missing[:5]}")
        params = {}
        for name, ref in expected.items():
            try:
                t = load_tensor(d / files[name]["file"])
            except (OSError, ValueError) as exc:
                raise CheckpointError(f"{name}: {exc}") from exc
            if t.shape != ref.shape:
                raise CheckpointError(f"{name}: checkpoint shape {t.shape}, model expects {ref.shape}")
            params[name] = Tensor(t.data, requires_grad=True)
        model.params_ = params
        model.epochs_trained_ = int(manifest.get("epoch", 0))
        return model


def _jsonable(params: dict) -> dict:
    out = {}
    for k, v in params.items():
        if isinstance(v, tuple):
            v = list(v)
        elif isinstance(v, np.generic):
            v = v.item()
        out[k] = v
    return out
