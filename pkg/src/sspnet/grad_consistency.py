"""Per-level gradient contributions reaching the deepest merged map.

A location is given in finest-level (level 2) cell coordinates and is
identified across levels by the nearest-upsampling index map
``cell_k = (i >> (k - 2), j >> (k - 2))``. Each level gets its own loss: a
fixed linear probe on ``P'_k`` at the aligned cell followed by a binary
cross-entropy against that level's label (1 when the location is a
positive centre there). With such probes the adjoint of ``P'_5`` at the
aligned cell is exactly ``sum_k psi_k * g_k``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .anchors import AnchorSpec, GtBox, match_anchors
from .backbone import LEVELS, FeaturePyramid, extract_features
from .cam import AttentionPyramid
from .neck import pyramid_forward, ssm_chain
from .tensor import Tensor


def aligned_cells(location: tuple[int, int], levels: Sequence[int] = LEVELS, bottom: int = 2) -> dict[int, tuple[int, int]]:
    i, j = location
    return {k: (i >> (k - bottom), j >> (k - bottom)) for k in levels}


def _check_location(location, shapes: Mapping[int, tuple[int, ...]], bottom: int = 2) -> dict[int, tuple[int, int]]:
    i, j = location
    h, w = shapes[bottom][-2:]
    if not (0 <= i < h and 0 <= j < w):
        raise ValueError(f"location {location} lies outside the {h}x{w} finest level")
    return aligned_cells(location, sorted(shapes), bottom)


def _a_value(a, cell) -> float:
    arr = a.data if isinstance(a, Tensor) else np.asarray(a)
    return float(arr.reshape(arr.shape[-2:])[cell] if arr.ndim == 2 else arr[0, 0][cell])


def psi(attention, location: tuple[int, int], k: int, top: int = 5) -> float:
    """Attention coefficient on level k's contribution: ``A_top * A_k * prod A_n**2``.

    The product runs over the intermediate levels ``k < n < top``; the deepest
    level's own contribution is ungated (1.0).
    """
    if k == top:
        return 1.0
    maps = attention.maps if isinstance(attention, AttentionPyramid) else attention
    cells = aligned_cells(location, sorted(maps))
    value = _a_value(maps[top], cells[top]) * _a_value(maps[k], cells[k])
    for n in range(k + 1, top):
        value *= _a_value(maps[n], cells[n]) ** 2
    return value


@dataclass
class LinearProbe:
    """Fixed per-level logistic probe ``sigmoid(w . P'_k[:, cell] + b)``."""

    weights: dict[int, np.ndarray]
    bias: dict[int, float] = field(default_factory=dict)

    @classmethod
    def uniform(cls, channels: int, levels: Sequence[int] = LEVELS, scale: float = 1.0) -> "LinearProbe":
        return cls({k: np.full(channels, scale / channels) for k in levels}, {k: 0.0 for k in levels})

    def logit(self, p: Tensor, k: int, cell: tuple[int, int]) -> Tensor:
        column = T.index(p, (0, slice(None), cell[0], cell[1]))
        return T.tsum(T.mul(column, Tensor(self.weights[k]))) + float(self.bias.get(k, 0.0))

    def loss(self, p: Tensor, k: int, cell: tuple[int, int], label: float) -> Tensor:
        z = self.logit(p, k, cell)
        return T.softplus(z) - T.mul(z, float(label))

    def closed_form_grad(self, p: np.ndarray, k: int, cell: tuple[int, int], label: float) -> float:
        """Channel-summed d(loss)/d(P'_k[:, cell]): ``(sigmoid(z) - y) * sum(w)``."""
        z = float(p[0, :, cell[0], cell[1]] @ self.weights[k]) + float(self.bias.get(k, 0.0))
        return (1.0 / (1.0 + np.exp(-z)) - label) * float(self.weights[k].sum())


@dataclass
class GradReport:
    location: tuple[int, int]
    labels: dict[int, int]
    g: dict[int, float]
    psi: dict[int, float]
    autograd_total: float
    decomposed_total: float
    residual: float
    channel_residual: float
    sign_conflict: bool
    conflict_mass: float
    ungated_conflict_mass: float

    def to_json(self) -> dict:
        d = asdict(self)
        d["location"] = list(self.location)
        for key in ("labels", "g", "psi"):
            d[key] = {str(k): v for k, v in d[key].items()}
        return d


def _conflict(contrib: dict[int, float], labels: dict[int, int]) -> tuple[bool, float, list[int]]:
    """Sign conflict flag, opposing mass and the opposing levels."""
    ref = np.sign(sum(v for k, v in contrib.items() if labels[k]))
    signs = {np.sign(v) for v in contrib.values() if v != 0}
    conflict = len(signs) > 1
    if ref == 0:
        return conflict, 0.0, []
    against = [k for k, v in contrib.items() if np.sign(v) == -ref]
    return conflict, float(sum(abs(contrib[k]) for k in against)), against


def decompose(merged: Mapping[int, Tensor], attention, location: tuple[int, int],
              labels: Mapping[int, int], probe: LinearProbe) -> GradReport:
    """Autograd vs ``sum_k psi_k * g_k`` at one location of a built merge graph.

    ``attention=None`` means plain top-down addition (every psi is 1).
    """
    ks = sorted(merged)
    top = ks[-1]
    cells = _check_location(location, {k: merged[k].shape for k in ks})
    labels = {k: int(labels.get(k, 0)) for k in ks}
    losses = {k: probe.loss(merged[k], k, cells[k], labels[k]) for k in ks}
    g_vec = {k: T.grad(losses[k], [merged[k]])[0][0, :, cells[k][0], cells[k][1]] for k in ks}
    total = losses[ks[0]]
    for k in ks[1:]:
        total = total + losses[k]
    auto_vec = T.grad(total, [merged[top]])[0][0, :, cells[top][0], cells[top][1]]
    psis = {k: 1.0 if attention is None else psi(attention, location, k, top) for k in ks}
    dec_vec = sum(psis[k] * g_vec[k] for k in ks)
    g = {k: float(g_vec[k].sum()) for k in ks}
    auto, dec = float(auto_vec.sum()), float(dec_vec.sum())
    contrib = {k: psis[k] * g[k] for k in ks}
    conflict, mass, against = _conflict(contrib, labels)
    ungated = float(sum(abs(g[k]) for k in against))
    return GradReport(
        location=tuple(location), labels=labels, g=g, psi=psis,
        autograd_total=auto, decomposed_total=dec, residual=abs(auto - dec),
        channel_residual=float(np.abs(auto_vec - dec_vec).max()),
        sign_conflict=conflict, conflict_mass=mass, ungated_conflict_mass=ungated,
    )


def controlled_graph(laterals: Mapping[int, np.ndarray], attention: Mapping[int, np.ndarray] | None,
                     top: np.ndarray) -> dict[int, Tensor]:
    """Merge chain over constant laterals and constant (detached) attention.

    ``top`` becomes the leaf ``P'_5``. Without attention the plain FPN
    addition is used.
    """
    lat = {k: Tensor(v) for k, v in laterals.items()}
    p_top = Tensor(top, requires_grad=True)
    if attention is None:
        ks = sorted(lat)
        merged = {ks[-1]: p_top}
        for k in reversed(ks[1:]):
            merged[k - 1] = T.upsample_nearest(merged[k], 2) + lat[k - 1]
        return merged
    att = AttentionPyramid({k: Tensor(v) for k, v in attention.items()})
    return ssm_chain(p_top, lat, att)


def recovered_psi(merged: Mapping[int, Tensor], location: tuple[int, int], k: int, channel: int = 0) -> float:
    """``d P'_k[c, cell_k] / d P'_top[c, cell_top]`` read off the tape."""
    ks = sorted(merged)
    top = ks[-1]
    cells = aligned_cells(location, ks)
    probe = T.index(merged[k], (0, channel, cells[k][0], cells[k][1]))
    g = T.grad(probe, [merged[top]])[0]
    return float(g[0, channel, cells[top][0], cells[top][1]])


def verify_decomposition(laterals, attention, top, location, labels, probe: LinearProbe | None = None) -> GradReport:
    merged = controlled_graph(laterals, attention, top)
    probe = probe or LinearProbe.uniform(top.shape[1], sorted(merged))
    att = None if attention is None else AttentionPyramid({k: Tensor(v) for k, v in attention.items()})
    return decompose(merged, att, location, labels, probe)


def per_layer_gradients(params: dict[str, Tensor], image: Tensor, labels: Mapping[int, int],
                        location: tuple[int, int], neck: str = "sspnet",
                        probe: LinearProbe | None = None) -> GradReport:
    """Run the full network and decompose the gradient reaching P'_5."""
    out = pyramid_forward(extract_features(image, params), params, neck)
    probe = probe or LinearProbe.uniform(out.merged.channel_count, out.merged.keys())
    return decompose(out.merged.levels, out.attention, location, labels, probe)


def location_labels(gt: GtBox, spec: AnchorSpec, pos_thr: float = 0.5) -> dict[int, int]:
    assign = match_anchors([gt], spec, pos_thr)
    return {k: int(k in assign.per_gt.get(0, [])) for k in spec.levels()}


@dataclass
class ConflictSummary:
    locations: int
    baseline_mean_mass: float
    sspnet_mean_mass: float
    fraction_reduced: float
    ratios: list[float]

    def to_json(self) -> dict:
        return asdict(self)


def conflict_report(baseline_params: dict[str, Tensor], sspnet_params: dict[str, Tensor],
                    sample: Sequence[tuple[np.ndarray, Sequence[GtBox]]], spec: AnchorSpec,
                    pos_thr: float = 0.5, max_scale: float = 20.0) -> ConflictSummary:
    """Opposing-gradient mass at tiny-object centres, plain FPN vs SSPNet.

    Only locations where some level is positive and another is background
    are probed; ratios are SSPNet mass over baseline mass.
    """
    base_mass, ssp_mass, ratios = [], [], []
    for image, gts in sample:
        img = Tensor(np.asarray(image, dtype=np.float64).reshape(1, 1, *np.shape(image)[-2:]))
        for gt in gts:
            if gt.ignore or gt.scale > max_scale:
                continue
            labels = location_labels(gt, spec, pos_thr)
            if len(set(labels.values())) < 2:
                continue
            cx, cy = gt.center
            loc = (int(cy // spec.strides[2]), int(cx // spec.strides[2]))
            b = per_layer_gradients(baseline_params, img, labels, loc, "baseline")
            s = per_layer_gradients(sspnet_params, img, labels, loc, "sspnet")
            base_mass.append(b.conflict_mass)
            ssp_mass.append(s.conflict_mass)
            if b.conflict_mass > 0:
                ratios.append(s.conflict_mass / b.conflict_mass)
    n = len(base_mass)
    return ConflictSummary(
        locations=n,
        baseline_mean_mass=float(np.mean(base_mass)) if n else 0.0,
        sspnet_mean_mass=float(np.mean(ssp_mass)) if n else 0.0,
        fraction_reduced=float(np.mean([r < 1 for r in ratios])) if ratios else 0.0,
        ratios=[float(r) for r in ratios],
    )
