"""Weighted negative sampling: confidence/IoF fused selection probabilities."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .anchors import pairwise

DEFAULT_LAMBDA = 0.6


@dataclass
class SampleScore:
    index: int
    confidence: float
    max_iof: float
    fused: float


def wns_scores(candidates: Sequence[tuple[float, float]], lam: float = DEFAULT_LAMBDA) -> np.ndarray:
    """Softmax over ``lam * C_i + (1 - lam) * I_i``.

    ``candidates`` holds ``(confidence, max_iof)`` pairs.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    cand = np.asarray(candidates, dtype=np.float64).reshape(-1, 2)
    if len(cand) == 0:
        raise ValueError("wns_scores needs a nonempty pool")
    logits = lam * cand[:, 0] + (1.0 - lam) * cand[:, 1]
    e = np.exp(logits - logits.max())
    return e / e.sum()


def score_table(candidates: Sequence[tuple[float, float]], lam: float = DEFAULT_LAMBDA) -> list[SampleScore]:
    s = wns_scores(candidates, lam)
    return [SampleScore(i, float(c), float(f), float(p)) for i, ((c, f), p) in enumerate(zip(candidates, s))]


def wns_sample(scores: Sequence[float], n: int, rng: np.random.Generator | int) -> list[int]:
    """Draw ``n`` distinct indices, each draw proportional to the remaining scores."""
    p = np.asarray(scores, dtype=np.float64).reshape(-1)
    if n > p.size:
        raise ValueError(f"cannot draw {n} samples from a pool of {p.size}")
    if n < 0:
        raise ValueError("n must be >= 0")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.Generator(np.random.PCG64(int(rng)))
    if n == 0:
        return []
    # Efraimidis-Spirakis keys give the same law as sequential draws without replacement
    u = rng.random(p.size)
    with np.errstate(divide="ignore"):
        keys = np.where(p > 0, np.log(u) / np.where(p > 0, p, 1.0), -np.inf)
    order = np.argsort(-keys, kind="stable")
    return [int(i) for i in order[:n]]


def candidate_pool(proposals: np.ndarray, objectness: np.ndarray, gts: np.ndarray,
                   neg_iou: float = 0.3) -> tuple[np.ndarray, np.ndarray]:
    """Negative proposals with their ``(confidence, max IoF)`` features.

    Returns ``(indices, features)`` where ``features[:, 1]`` is the largest
    fraction of any GT covered by the proposal.
    """
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    objectness = np.asarray(objectness, dtype=np.float64).reshape(-1)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    if len(gts) == 0:
        idx = np.arange(len(proposals))
        return idx, np.stack([objectness, np.zeros(len(proposals))], axis=1)
    max_iou = pairwise("iou", proposals, gts).max(axis=1)
    idx = np.flatnonzero(max_iou < neg_iou)
    fg_cover = pairwise("iof", gts, proposals[idx]).max(axis=0) if len(idx) else np.zeros(0)
    return idx, np.stack([objectness[idx], fg_cover], axis=1)
