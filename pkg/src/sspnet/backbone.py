"""Toy strided backbone producing C2..C5 and the plain FPN top-down merge."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor

LEVELS = (2, 3, 4, 5)


@dataclass
class FeaturePyramid:
    """Per-level NCHW maps keyed by level index with their strides."""

    levels: dict[int, Tensor]
    strides: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.strides:
            self.strides = {k: 2 ** k for k in self.levels}

    def __getitem__(self, k: int) -> Tensor:
        return self.levels[k]

    def keys(self) -> list[int]:
        return sorted(self.levels)

    @property
    def channel_count(self) -> int:
        counts = {t.shape[1] for t in self.levels.values()}
        if len(counts) != 1:
            raise DimensionError(f"pyramid channels are not uniform: {sorted(counts)}")
        return counts.pop()


def conv_param(rng: np.random.Generator, c_out: int, c_in: int, k: int, name: str) -> dict[str, Tensor]:
    fan_in = c_in * k * k
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k))
    return {f"{name}.w": Tensor(w, requires_grad=True), f"{name}.b": Tensor(np.zeros(c_out), requires_grad=True)}


def init_backbone(rng: np.random.Generator, in_channels: int = 1, width: int = 4,
                  channels: int = 4, stages: int = 5) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    c_in = in_channels
    for s in range(1, stages + 1):
        params.update(conv_param(rng, width, c_in, 3, f"backbone.s{s}.conv"))
        params.update(conv_param(rng, width, width, 3, f"backbone.s{s}.down"))
        c_in = width
    for k in LEVELS:
        params.update(conv_param(rng, channels, width, 1, f"backbone.lateral{k}"))
    return params


def backbone_param_count(in_channels: int = 1, width: int = 4, channels: int = 4, stages: int = 5) -> int:
    first = width * in_channels * 9 + width
    same = width * width * 9 + width
    lateral = channels * width + channels
    return first + same + (stages - 1) * 2 * same + len(LEVELS) * lateral


def extract_features(image: Tensor, params: dict[str, Tensor], stages: int = 5) -> FeaturePyramid:
    """Run the stage ladder and return 1x1-projected C2..C5."""
    if image.ndim != 4:
        raise DimensionError(f"image must be NCHW, got {image.shape}")
    h, w = image.shape[2:]
    div = 2 ** stages
    if h % div or w % div:
        raise ValueError(f"image {h}x{w} is not divisible by {div}")
    x = image
    raw: dict[int, Tensor] = {}
    for s in range(1, stages + 1):
        x = T.relu(T.conv2d(x, params[f"backbone.s{s}.conv.w"], params[f"backbone.s{s}.conv.b"], padding=1))
        x = T.conv2d(x, params[f"backbone.s{s}.down.w"], params[f"backbone.s{s}.down.b"], stride=2, padding=1)
        raw[s] = x
    levels = {
        k: T.conv2d(raw[k], params[f"backbone.lateral{k}.w"], params[f"backbone.lateral{k}.b"])
        for k in LEVELS
    }
    return FeaturePyramid(levels, {k: 2 ** k for k in LEVELS})


def fpn_merge_baseline(pyramid: FeaturePyramid) -> FeaturePyramid:
    """Top-down addition: ``P5 = C5``, ``P(k-1) = up2(Pk) + C(k-1)``."""
    pyramid.channel_count  # raises on mismatch
    ks = pyramid.keys()
    merged = {ks[-1]: pyramid[ks[-1]]}
    for k in reversed(ks[1:]):
        merged[k - 1] = T.upsample_nearest(merged[k], 2) + pyramid[k - 1]
    return FeaturePyramid(merged, dict(pyramid.strides))
