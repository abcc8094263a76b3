"""Scale enhancement, scale selection and the composed pyramid forward pass."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .backbone import LEVELS, FeaturePyramid, conv_param, extract_features, fpn_merge_baseline
from .cam import DEFAULT_RATES, AttentionPyramid, context_attention
from .errors import DimensionError
from .tensor import Tensor

NECKS = ("baseline", "sspnet")


@dataclass
class NeckOutput:
    merged: FeaturePyramid            # P'_k
    outputs: FeaturePyramid           # P_k, after the per-level 3x3 conv
    attention: AttentionPyramid | None
    features: FeaturePyramid          # raw C_k
    provenance: str


def _check_gate(f: Tensor, a: Tensor, what: str) -> None:
    if a.ndim != 4 or a.shape[1] != 1:
        raise DimensionError(f"{what}: attention must be single-channel NCHW, got {a.shape}")
    if f.ndim != 4 or f.shape[0] != a.shape[0] or f.shape[2:] != a.shape[2:]:
        raise DimensionError(f"{what}: feature {f.shape} and attention {a.shape} are misaligned")


def sem(features: Tensor, attention: Tensor) -> Tensor:
    """Residual gating ``(1 + A) * F`` with A broadcast over channels."""
    _check_gate(features, attention, "sem")
    return T.mul(T.scalar_affine(attention), features)


def ssm_merge(p_next: Tensor, a_next: Tensor, a_cur: Tensor, c_cur: Tensor) -> Tensor:
    """One scale-selection step producing P'_{k-1} from P'_k.

    ``(A_{k-1} * up(A_k)) * up(P'_k) + C_{k-1}``
    """
    _check_gate(p_next, a_next, "ssm_merge")
    _check_gate(c_cur, a_cur, "ssm_merge")
    up_p = T.upsample_nearest(p_next, 2)
    if up_p.shape != c_cur.shape:
        raise DimensionError(f"ssm_merge: upsampled {up_p.shape} does not match lateral {c_cur.shape}")
    gate = T.mul(a_cur, T.upsample_nearest(a_next, 2))
    return T.mul(gate, up_p) + c_cur


def ssm_chain(top: Tensor, laterals: dict[int, Tensor], attention: AttentionPyramid) -> dict[int, Tensor]:
    """Run :func:`ssm_merge` from the deepest level down; ``top`` is P'_top."""
    ks = sorted(laterals)
    merged = {ks[-1]: top}
    for k in reversed(ks[1:]):
        merged[k - 1] = ssm_merge(merged[k], attention[k], attention[k - 1], laterals[k - 1])
    return merged


def init_neck(rng: np.random.Generator, channels: int = 4, levels: Sequence[int] = LEVELS) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for k in levels:
        params.update(conv_param(rng, channels, channels, 3, f"neck.out{k}"))
    return params


def output_convs(merged: FeaturePyramid, params: dict[str, Tensor]) -> FeaturePyramid:
    out = {k: T.conv2d(v, params[f"neck.out{k}.w"], params[f"neck.out{k}.b"], padding=1)
           for k, v in merged.levels.items()}
    return FeaturePyramid(out, dict(merged.strides))


def sspnet_neck(features: FeaturePyramid, attention: AttentionPyramid) -> FeaturePyramid:
    """SEM on every lateral, then the SSM chain seeded with SEM(C_top)."""
    enhanced = {k: sem(features[k], attention[k]) for k in features.keys()}
    top = max(enhanced)
    return FeaturePyramid(ssm_chain(enhanced[top], enhanced, attention), dict(features.strides))


def pyramid_forward(features: FeaturePyramid, params: dict[str, Tensor], neck: str = "sspnet",
                    rates: Sequence[int] = DEFAULT_RATES,
                    attention: AttentionPyramid | None = None) -> NeckOutput:
    """Neck and output convs over given C_k. ``attention`` bypasses CAM when set."""
    if neck not in NECKS:
        raise ValueError(f"neck must be one of {NECKS}, got {neck!r}")
    if neck == "baseline":
        merged = fpn_merge_baseline(features)
        att = None
    else:
        att = attention if attention is not None else context_attention(features, params, rates)
        merged = sspnet_neck(features, att)
    return NeckOutput(merged, output_convs(merged, params), att, features, neck)


def sspnet_forward(image: Tensor, params: dict[str, Tensor], neck: str = "sspnet",
                   rates: Sequence[int] = DEFAULT_RATES,
                   attention: AttentionPyramid | None = None) -> NeckOutput:
    return pyramid_forward(extract_features(image, params), params, neck, rates, attention)
