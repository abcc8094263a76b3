"""Finite-difference suite over every primitive and composite block.

Each case builds a random scalar function of one tensor from a seed; the
suite reports the worst relative error of autodiff against central
differences across seeds. Composite cases probe a fixed number of random
coordinates per seed to keep the runtime small.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .backbone import LEVELS, FeaturePyramid, init_backbone
from .cam import aspp, attention_heatmaps, build_context, context_attention, init_cam
from .losses import attention_loss, bce_ohem_loss, cross_entropy, bce_with_logits, dice_loss, smooth_l1
from .neck import init_neck, pyramid_forward, sem, ssm_merge, sspnet_forward
from .tensor import Tensor, finite_diff_check

EPS = 1e-5
TOLERANCE = 1e-4

Case = Callable[[np.random.Generator], tuple[Callable[[Tensor], Tensor], Tensor, "list[int] | None"]]


def _weights(rng, shape):
    return rng.normal(0.0, 1.0, size=shape)


def _probe(rng, shape) -> Tensor:
    """Random projection turning any tensor into a scalar loss."""
    return Tensor(rng.normal(size=shape))


def _scalarize(out: Tensor, w: Tensor) -> Tensor:
    return T.tsum(T.mul(out, w))


def _coords(rng, size, k):
    return None if size <= k else sorted(rng.choice(size, k, replace=False).tolist())


def _elementwise(fn, low=-2.0, high=2.0):
    def case(rng):
        x = Tensor(rng.uniform(low, high, size=(2, 3, 4)))
        w = _probe(rng, x.shape)
        return (lambda t: _scalarize(fn(t), w)), x, None
    return case


def _relu_case(rng):
    # keep inputs away from the kink so the function is smooth at x
    x = rng.uniform(0.05, 2.0, size=(2, 3, 4)) * rng.choice([-1.0, 1.0], size=(2, 3, 4))
    w = _probe(rng, x.shape)
    return (lambda t: _scalarize(T.relu(t), w)), Tensor(x), None


def _binary(fn):
    def case(rng):
        a = Tensor(rng.uniform(0.5, 2.0, size=(2, 3, 4)))
        b = rng.uniform(0.5, 2.0, size=(2, 3, 4))
        w = _probe(rng, a.shape)
        return (lambda t: _scalarize(fn(t, Tensor(b)), w) + _scalarize(fn(Tensor(b), t), w)), a, None
    return case


def _channel_mul(rng):
    a = Tensor(rng.normal(size=(1, 1, 4, 4)))
    f = rng.normal(size=(1, 3, 4, 4))
    w = _probe(rng, f.shape)
    return (lambda t: _scalarize(T.mul(t, Tensor(f)), w)), a, None


def _softmax(rng):
    x = Tensor(rng.normal(size=(3, 5)))
    w = _probe(rng, x.shape)
    return (lambda t: _scalarize(T.softmax(t, axis=1), w)), x, None


def _log_softmax(rng):
    x = Tensor(rng.normal(size=(3, 5)))
    w = _probe(rng, x.shape)
    return (lambda t: _scalarize(T.log_softmax(t, axis=1), w)), x, None


def _concat(rng):
    a = Tensor(rng.normal(size=(1, 2, 3, 3)))
    b = rng.normal(size=(1, 3, 3, 3))
    w = _probe(rng, (1, 5, 3, 3))
    return (lambda t: _scalarize(T.concat([t, Tensor(b)], axis=1), w)), a, None


def _upsample(rng):
    x = Tensor(rng.normal(size=(1, 2, 3, 3)))
    w = _probe(rng, (1, 2, 6, 6))
    return (lambda t: _scalarize(T.upsample_nearest(t, 2), w)), x, None


def _conv_input(rng):
    stride, dilation, padding = (int(v) for v in rng.choice([1, 2], size=3))
    padding -= 1
    x = Tensor(rng.normal(size=(1, 2, 8, 8)))
    wt = _weights(rng, (3, 2, 3, 3))
    b = rng.normal(size=3)
    out = T.conv2d(x, wt, b, stride, dilation, padding)
    w = _probe(rng, out.shape)
    return (lambda t: _scalarize(T.conv2d(t, Tensor(wt), Tensor(b), stride, dilation, padding), w)), x, None


def _conv_weight(rng):
    stride, dilation, padding = (int(v) for v in rng.choice([1, 2], size=3))
    padding -= 1
    x = rng.normal(size=(1, 2, 8, 8))
    wt = Tensor(_weights(rng, (3, 2, 3, 3)))
    out = T.conv2d(x, wt, None, stride, dilation, padding)
    w = _probe(rng, out.shape)
    return (lambda t: _scalarize(T.conv2d(Tensor(x), t, None, stride, dilation, padding), w)), wt, None


def _matmul(rng):
    a = Tensor(rng.normal(size=(3, 4)))
    b = rng.normal(size=(4, 2))
    w = _probe(rng, (3, 2))
    return (lambda t: _scalarize(T.matmul(t, Tensor(b)), w)), a, None


def _index(rng):
    x = Tensor(rng.normal(size=(1, 3, 4, 4)))
    rows = rng.integers(0, 4, size=(5, 9))
    cols = rng.integers(0, 4, size=(5, 9))
    w = _probe(rng, (5, 9, 3))
    return (lambda t: _scalarize(T.index(t, (0, slice(None), rows, cols)), w)), x, None


def _pyramid(rng, channels=4, base=8, n=1) -> FeaturePyramid:
    return FeaturePyramid({k: Tensor(rng.normal(size=(n, channels, base >> (k - 2), base >> (k - 2))))
                           for k in LEVELS})


def _attention_block(rng):
    ctx = Tensor(rng.normal(size=(1, 4, 8, 8)))
    params = init_cam(rng, 16, 4)
    for v in params.values():
        v.data += rng.normal(0, 0.2, size=v.shape)
    w = {k: _probe(rng, (1, 1, 8 >> (k - 2), 8 >> (k - 2))) for k in LEVELS}

    def f(t):
        att = attention_heatmaps(t, params)
        total = Tensor(0.0)
        for k in LEVELS:
            total = total + _scalarize(att[k], w[k])
        return total

    return f, ctx, _coords(rng, ctx.size, 24)


def _cam_full(rng):
    pyr = _pyramid(rng)
    params = init_cam(rng, 16, 4)
    for v in params.values():
        v.data += rng.normal(0, 0.2, size=v.shape)
    w = {k: _probe(rng, (1, 1, 8 >> (k - 2), 8 >> (k - 2))) for k in LEVELS}
    x = Tensor(pyr[2].data)

    def f(t):
        levels = dict(pyr.levels)
        levels[2] = t
        att = context_attention(FeaturePyramid(levels), params)
        total = Tensor(0.0)
        for k in LEVELS:
            total = total + _scalarize(att[k], w[k])
        return total

    return f, x, _coords(rng, x.size, 12)


def _aspp_case(rng):
    params = init_cam(rng, 3, 4)
    for v in params.values():
        v.data += rng.normal(0, 0.2, size=v.shape)
    x = Tensor(rng.normal(size=(1, 3, 8, 8)))
    w = _probe(rng, (1, 4, 8, 8))
    return (lambda t: _scalarize(aspp(t, params), w)), x, _coords(rng, x.size, 16)


def _context_case(rng):
    pyr = _pyramid(rng)
    w = _probe(rng, (1, 16, 8, 8))
    x = Tensor(pyr[4].data)

    def f(t):
        levels = dict(pyr.levels)
        levels[4] = t
        return _scalarize(build_context(FeaturePyramid(levels)), w)

    return f, x, None


def _sem_features(rng):
    a = rng.uniform(0.05, 0.95, size=(1, 1, 4, 4))
    x = Tensor(rng.normal(size=(1, 3, 4, 4)))
    w = _probe(rng, x.shape)
    return (lambda t: _scalarize(sem(t, Tensor(a)), w)), x, None


def _sem_attention(rng):
    a = Tensor(rng.uniform(0.05, 0.95, size=(1, 1, 4, 4)))
    x = rng.normal(size=(1, 3, 4, 4))
    w = _probe(rng, x.shape)
    return (lambda t: _scalarize(sem(Tensor(x), t), w)), a, None


def _ssm_case(which):
    def case(rng):
        vals = {
            "p": rng.normal(size=(1, 3, 2, 2)),
            "a_next": rng.uniform(0.05, 0.95, size=(1, 1, 2, 2)),
            "a_cur": rng.uniform(0.05, 0.95, size=(1, 1, 4, 4)),
            "c": rng.normal(size=(1, 3, 4, 4)),
        }
        w = _probe(rng, (1, 3, 4, 4))

        def f(t):
            args = {k: Tensor(v) for k, v in vals.items()}
            args[which] = t
            return _scalarize(ssm_merge(args["p"], args["a_next"], args["a_cur"], args["c"]), w)

        return f, Tensor(vals[which]), None
    return case


def _neck_stack(rng):
    """C-pyramid (finest level 1x4x8x8) through CAM, SEM, SSM and output convs."""
    pyr = _pyramid(rng)
    params = init_cam(rng, 16, 4)
    params.update(init_neck(rng, 4))
    for v in params.values():
        v.data += rng.normal(0, 0.2, size=v.shape)
    w = {k: _probe(rng, (1, 4, 8 >> (k - 2), 8 >> (k - 2))) for k in LEVELS}
    x = Tensor(pyr[2].data)

    def f(t):
        levels = dict(pyr.levels)
        levels[2] = t
        out = pyramid_forward(FeaturePyramid(levels), params, "sspnet")
        total = Tensor(0.0)
        for k in LEVELS:
            total = total + _scalarize(out.merged[k], w[k]) + _scalarize(out.outputs[k], w[k])
        return total

    return f, x, _coords(rng, x.size, 12)


def _full_net(rng):
    params = init_backbone(rng, 1, 3, 3)
    params.update(init_cam(rng, 12, 3))
    params.update(init_neck(rng, 3))
    for v in params.values():
        v.data += rng.normal(0, 0.1, size=v.shape)
    img = Tensor(rng.normal(size=(1, 1, 32, 32)))
    w = {k: _probe(rng, (1, 3, 32 >> k, 32 >> k)) for k in LEVELS}

    def f(t):
        out = sspnet_forward(t, params, "sspnet")
        total = Tensor(0.0)
        for k in LEVELS:
            total = total + _scalarize(out.outputs[k], w[k])
        return total

    return f, img, _coords(rng, img.size, 6)


def _dice(rng):
    a = Tensor(rng.uniform(0.05, 0.95, size=(6, 6)))
    s = (rng.random((6, 6)) < 0.3).astype(float)
    return (lambda t: dice_loss(t, s)), a, None


def _bce_ohem(rng):
    a = Tensor(rng.uniform(0.05, 0.95, size=(6, 6)))
    s = (rng.random((6, 6)) < 0.15).astype(float)
    return (lambda t: bce_ohem_loss(t, s)), a, None


def _attention_loss(rng):
    maps = {k: rng.uniform(0.05, 0.95, size=(8 >> (k - 2), 8 >> (k - 2))) for k in LEVELS}
    tgt = {k: (rng.random(v.shape) < 0.2).astype(float) for k, v in maps.items()}
    x = Tensor(maps[3])

    def f(t):
        att = {k: Tensor(v) for k, v in maps.items()}
        att[3] = t
        return attention_loss(att, tgt)

    return f, x, None


def _smooth_l1(rng):
    p = rng.normal(0, 1.5, size=(5, 4))
    p[np.abs(np.abs(p) - 1.0) < 0.01] += 0.05  # stay off the |d| = 1 seam
    return (lambda t: smooth_l1(t, np.zeros((5, 4)))), Tensor(p), None


def _bce_logits(rng):
    z = Tensor(rng.normal(0, 2, size=(7,)))
    y = (rng.random(7) < 0.5).astype(float)
    return (lambda t: bce_with_logits(t, y)), z, None


def _cross_entropy(rng):
    z = Tensor(rng.normal(0, 2, size=(5, 2)))
    y = rng.integers(0, 2, size=5)
    return (lambda t: cross_entropy(t, y)), z, None


CASES: dict[str, Case] = {
    "sigmoid": _elementwise(T.sigmoid, -4, 4),
    "relu": _relu_case,
    "exp": _elementwise(T.exp),
    "log": _elementwise(T.log, 0.2, 3.0),
    "softplus": _elementwise(T.softplus, -4, 4),
    "square": _elementwise(T.square),
    "scalar_affine": _elementwise(T.scalar_affine),
    "elementwise_mul": _binary(T.mul),
    "elementwise_add": _binary(T.add),
    "div": _binary(T.div),
    "channel_broadcast_mul": _channel_mul,
    "softmax": _softmax,
    "log_softmax": _log_softmax,
    "concat": _concat,
    "nearest_upsample": _upsample,
    "conv2d_input": _conv_input,
    "conv2d_weight": _conv_weight,
    "matmul": _matmul,
    "gather": _index,
    "cam_context": _context_case,
    "cam_aspp": _aspp_case,
    "cam_heatmaps": _attention_block,
    "cam_full": _cam_full,
    "sem_features": _sem_features,
    "sem_attention": _sem_attention,
    "ssm_p": _ssm_case("p"),
    "ssm_a_next": _ssm_case("a_next"),
    "ssm_a_cur": _ssm_case("a_cur"),
    "ssm_c": _ssm_case("c"),
    "neck_stack": _neck_stack,
    "dice_loss": _dice,
    "bce_ohem_loss": _bce_ohem,
    "attention_loss": _attention_loss,
    "smooth_l1": _smooth_l1,
    "bce_with_logits": _bce_logits,
    "cross_entropy": _cross_entropy,
    "full_net": _full_net,
}


@dataclass
class SuiteResult:
    errors: dict[str, float]
    skipped: dict[str, int]
    probed: dict[str, int]
    seconds: float

    @property
    def passed(self) -> bool:
        return all(e < TOLERANCE for e in self.errors.values())

    def table(self) -> str:
        lines = [f"{'case':<24}{'max rel err':>14}{'kinks':>8}  status"]
        for name, err in self.errors.items():
            kinks = f"{self.skipped[name]}/{self.probed[name]}"
            lines.append(f"{name:<24}{err:>14.3e}{kinks:>8}  {'ok' if err < TOLERANCE else 'FAIL'}")
        bad = sum(err >= TOLERANCE for err in self.errors.values())
        lines.append(f"{len(self.errors)} cases, {bad} failing")
        return "\n".join(lines)


def check_case(case: Case, seed: int, eps: float = EPS, stats: dict | None = None) -> float:
    rng = np.random.default_rng(seed)
    f, x, coords = case(rng)
    return finite_diff_check(f, x, eps, coords, stats=stats)


def run_suite(seeds: int = 100, eps: float = EPS, names=None, base_seed: int = 0) -> SuiteResult:
    start = time.perf_counter()
    errors, skipped, probed = {}, {}, {}
    for name, case in CASES.items():
        if names and name not in names:
            continue
        stats: dict = {}
        errors[name] = max(check_case(case, base_seed + s, eps, stats) for s in range(seeds))
        skipped[name], probed[name] = stats["skipped"], stats["probed"]
    return SuiteResult(errors, skipped, probed, time.perf_counter() - start)
