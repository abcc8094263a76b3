"""Context attention: multi-level context features and per-level sigmoid gates."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .backbone import LEVELS, FeaturePyramid, conv_param
from .errors import GeometryError
from .tensor import Tensor

DEFAULT_RATES = (1, 2, 4)


@dataclass
class AttentionPyramid:
    maps: dict[int, Tensor]
    strides: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.strides:
            self.strides = {k: 2 ** k for k in self.maps}

    def __getitem__(self, k: int) -> Tensor:
        return self.maps[k]

    def keys(self) -> list[int]:
        return sorted(self.maps)

    def detached(self) -> "AttentionPyramid":
        return AttentionPyramid({k: v.detach() for k, v in self.maps.items()}, dict(self.strides))

    @classmethod
    def constant(cls, like: FeaturePyramid, value: float) -> "AttentionPyramid":
        maps = {}
        for k, t in like.levels.items():
            n, _, h, w = t.shape
            maps[k] = Tensor(np.full((n, 1, h, w), float(value)))
        return cls(maps, dict(like.strides))


def init_cam(rng: np.random.Generator, context_channels: int, channels: int = 4,
             rates: Sequence[int] = DEFAULT_RATES, levels: Sequence[int] = LEVELS,
             gate_bias: float = 0.0) -> dict[str, Tensor]:
    """ASPP and per-level gate weights; ``gate_bias`` sets the initial logit of every A_k."""
    params: dict[str, Tensor] = {}
    for r in rates:
        params.update(conv_param(rng, channels, context_channels, 3, f"cam.aspp.rate{r}"))
    params.update(conv_param(rng, channels, context_channels, 1, "cam.aspp.point"))
    params.update(conv_param(rng, channels, channels * (len(rates) + 1), 1, "cam.aspp.fuse"))
    for k in levels:
        p = conv_param(rng, 1, channels, 3, f"cam.gate{k}")
        p[f"cam.gate{k}.w"].data *= 0.1
        p[f"cam.gate{k}.b"].data[:] = gate_bias
        params.update(p)
    return params


def build_context(pyramid: FeaturePyramid) -> Tensor:
    """Upsample every level to the finest one and concatenate along channels."""
    ks = pyramid.keys()
    if len(ks) < 2:
        raise ValueError("context needs at least two pyramid levels")
    bottom = ks[0]
    parts = [T.upsample_nearest(pyramid[k], pyramid.strides[k] // pyramid.strides[bottom]) for k in ks]
    return T.concat(parts, axis=1)


def aspp(x: Tensor, params: dict[str, Tensor], rates: Sequence[int] = DEFAULT_RATES) -> Tensor:
    if not rates:
        raise ValueError("aspp needs at least one rate")
    if any(r < 1 for r in rates):
        raise ValueError(f"aspp rates must be >= 1, got {list(rates)}")
    branches = [
        T.relu(T.conv2d(x, params[f"cam.aspp.rate{r}.w"], params[f"cam.aspp.rate{r}.b"], dilation=r, padding=r))
        for r in rates
    ]
    branches.append(T.relu(T.conv2d(x, params["cam.aspp.point.w"], params["cam.aspp.point.b"])))
    return T.conv2d(T.concat(branches, axis=1), params["cam.aspp.fuse.w"], params["cam.aspp.fuse.b"])


def attention_heatmaps(context: Tensor, params: dict[str, Tensor], levels: Sequence[int] = LEVELS,
                       bottom: int = 2) -> AttentionPyramid:
    """``A_k = sigmoid(conv3x3(context, stride=2**(k - bottom), padding=1))``."""
    h, w = context.shape[2:]
    maps = {}
    for k in levels:
        s = 2 ** (k - bottom)
        if h % s or w % s:
            raise GeometryError(f"context {h}x{w} cannot be reduced by stride {s} for level {k}")
        maps[k] = T.sigmoid(T.conv2d(context, params[f"cam.gate{k}.w"], params[f"cam.gate{k}.b"],
                                     stride=s, padding=1))
    return AttentionPyramid(maps, {k: 2 ** k for k in levels})


def context_attention(pyramid: FeaturePyramid, params: dict[str, Tensor],
                      rates: Sequence[int] = DEFAULT_RATES) -> AttentionPyramid:
    ks = pyramid.keys()
    ctx = aspp(build_context(pyramid), params, rates)
    att = attention_heatmaps(ctx, params, ks, bottom=ks[0])
    att.strides = dict(pyramid.strides)
    return att
