"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s`` to see the lines
next to the pytest verdicts.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from sspnet import tensor as T
from sspnet.anchors import GtBox, geometric_ladder, in_partition, kmeans_anchors, kmeans_wh, mean_best_iou
from sspnet.backbone import LEVELS, FeaturePyramid, fpn_merge_baseline
from sspnet.cam import AttentionPyramid
from sspnet.cli import main
from sspnet.config import ExperimentConfig, load_config
from sspnet.data import gen_synthetic
from sspnet.detector import SSPNetDetector
from sspnet.grad_consistency import LinearProbe, controlled_graph, psi, recovered_psi, verify_decomposition
from sspnet.gradcheck import EPS, TOLERANCE, run_suite
from sspnet.losses import LossWeights, PROB_CLIP, dice_loss, ohem_mask
from sspnet.metrics import average_precision, evaluate, match_detections
from sspnet.neck import ssm_chain
from sspnet.tensor import Tensor
from sspnet.wns import wns_sample, wns_scores

from oracles import brute_ap, brute_evaluate, brute_match
from test_metrics import GOLDEN, golden_instance, random_instance

ROOT = Path(__file__).resolve().parents[1]
DIRECTIONAL = ROOT / "configs" / "directional.json"


def verdict(capsys, name, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, detail


# -- 1 ---------------------------------------------------------------------------

def test_gradient_suite(capsys):
    result = run_suite(seeds=100, eps=EPS)
    worst = max(result.errors.values())
    ok = result.passed and worst < TOLERANCE and result.seconds < 60
    verdict(capsys, "gradient suite", ok,
            f"{len(result.errors)} cases x 100 seeds, max rel err {worst:.2e}, {result.seconds:.1f}s")


# -- 2 ---------------------------------------------------------------------------

def _controlled(seed, size=16, ch=4):
    rng = np.random.default_rng(seed)
    lat = {k: rng.normal(size=(1, ch, size >> (k - 2), size >> (k - 2))) for k in LEVELS}
    att = {k: rng.uniform(0.02, 0.98, size=(1, 1, size >> (k - 2), size >> (k - 2))) for k in LEVELS}
    top = rng.normal(size=lat[5].shape)
    loc = (int(rng.integers(size)), int(rng.integers(size)))
    return rng, lat, att, top, loc


def test_decomposition(capsys):
    worst_res, worst_psi = 0.0, 0.0
    for seed in range(100):
        rng, lat, att, top, loc = _controlled(seed)
        labels = {k: int(rng.integers(2)) for k in LEVELS}
        probe = LinearProbe({k: rng.normal(size=4) for k in LEVELS}, {k: float(rng.normal()) for k in LEVELS})
        rep = verify_decomposition(lat, att, top, loc, labels, probe)
        worst_res = max(worst_res, rep.residual, rep.channel_residual)
        merged = controlled_graph(lat, att, top)
        for k in (2, 3, 4):
            worst_psi = max(worst_psi, abs(recovered_psi(merged, loc, k) - psi(att, loc, k)))
    ok = worst_res < 1e-9 and worst_psi < 1e-9
    verdict(capsys, "gradient decomposition", ok,
            f"100 seeds, max residual {worst_res:.2e}, max psi error {worst_psi:.2e}")


# -- 3 ---------------------------------------------------------------------------

def test_fpn_reduction(capsys):
    worst = 0.0
    for seed in range(20):
        _, lat, _, _, _ = _controlled(seed)
        lat_t = {k: Tensor(v) for k, v in lat.items()}
        ones = AttentionPyramid({k: Tensor(np.ones((1, 1) + v.shape[2:])) for k, v in lat.items()})
        ssm = ssm_chain(lat_t[5], lat_t, ones)
        base = fpn_merge_baseline(FeaturePyramid(lat_t))
        worst = max(worst, max(float(np.abs(ssm[k].data - base[k].data).max()) for k in LEVELS))

    _, lat, att, top, _ = _controlled(7)
    att[4][...] = 0.0            # A_4 * up(A_5) vanishes everywhere
    merged = controlled_graph(lat, att, top)
    shallow = T.tsum(merged[2]) + T.tsum(merged[3]) + T.tsum(merged[4])
    (g,) = T.grad(shallow, [merged[5]])
    zero = not g.any()
    ok = worst <= 1e-12 and zero
    verdict(capsys, "FPN reduction", ok,
            f"unit-attention max diff {worst:.1e}; gated-off gradient exactly zero: {zero}")


# -- 4 ---------------------------------------------------------------------------

def test_conflict_suppression(capsys):
    labels = {2: 1, 3: 0, 4: 0, 5: 0}
    conflicts, reduced, probed = 0, 0, 0
    for seed in range(100):
        rng, lat, att, top, loc = _controlled(seed)
        probe = LinearProbe({k: np.abs(rng.normal(size=4)) for k in LEVELS}, {k: float(rng.normal()) for k in LEVELS})
        base = verify_decomposition(lat, None, top, loc, labels, probe)
        ssp = verify_decomposition(lat, att, top, loc, labels, probe)
        conflicts += base.sign_conflict and base.conflict_mass > 0
        against = [k for k in (3, 4) if np.sign(ssp.g[k]) == -np.sign(ssp.g[2])]
        gated = all(ssp.psi[k] < 1 and ssp.psi[k] * abs(ssp.g[k]) < abs(ssp.g[k]) for k in against)
        reduced += gated and ssp.conflict_mass < ssp.ungated_conflict_mass
        probed += 1
    ok = conflicts == probed and reduced == probed
    verdict(capsys, "conflict suppression", ok,
            f"baseline sign conflict at {conflicts}/{probed} cells; psi-reduced mass at {reduced}/{probed}")


# -- 5 ---------------------------------------------------------------------------

def test_loss_properties(capsys):
    rng = np.random.default_rng(0)
    in_range = True
    for _ in range(100):
        a = rng.uniform(PROB_CLIP, 1 - PROB_CLIP, size=(8, 8))
        s = (rng.random((8, 8)) < 0.2).astype(float)
        v = dice_loss(Tensor(a), s).item()
        in_range &= 0.0 <= v < 1.0
    s = (rng.random((8, 8)) < 0.3).astype(float)
    self_dice = dice_loss(Tensor(np.clip(s, PROB_CLIP, 1 - PROB_CLIP)), s).item()
    ratio_ok = True
    for _ in range(100):
        s = (rng.random((12, 12)) < 0.1).astype(float)
        n_pos = int(s.sum())
        if not n_pos or 3 * n_pos > s.size - n_pos:
            continue
        mask = ohem_mask(rng.random((12, 12)), s)
        ratio_ok &= int(mask[s > 0].sum()) == n_pos and int(mask[s == 0].sum()) == 3 * n_pos
    cfg = ExperimentConfig()
    det = SSPNetDetector(**cfg.detector_params())
    w = det._weights()
    defaults_ok = (cfg["loss.alpha"], cfg["loss.beta"]) == (0.01, 1.0) and (w.alpha, w.beta) == (0.01, 1.0)
    ok = in_range and self_dice < 1e-6 and ratio_ok and defaults_ok
    verdict(capsys, "loss properties", ok,
            f"dice in [0,1): {in_range}; dice(A,A)={self_dice:.1e}; OHEM 1:3 exact: {ratio_ok}; "
            f"alpha={w.alpha}, beta={w.beta} from config")


# -- 6 ---------------------------------------------------------------------------

def test_wns(capsys):
    rng = np.random.default_rng(1)
    worst_sum = 0.0
    for _ in range(100):
        s = wns_scores(rng.random((int(rng.integers(1, 60)), 2)), float(rng.random()))
        worst_sum = max(worst_sum, abs(s.sum() - 1.0))
    c = rng.random(10)
    a = wns_scores(np.stack([c, rng.random(10)], 1), 1.0)
    b = wns_scores(np.stack([c, rng.random(10)], 1), 1.0)
    ignores = a.tobytes() == b.tobytes()
    s = wns_scores([(0.9, 0.5), (0.1, 0.9), (0.5, 0.0), (0.3, 0.3), (0.95, 0.9)])
    gen = np.random.Generator(np.random.PCG64(0))
    counts = np.zeros(len(s))
    for _ in range(100_000):
        counts[wns_sample(s, 1, gen)[0]] += 1
    dev = float(np.abs(counts / 100_000 - s).max())
    lam = ExperimentConfig()["wns.lambda"]
    ok = worst_sum <= 1e-12 and ignores and dev < 0.01 and lam == 0.6
    verdict(capsys, "WNS", ok, f"max |sum-1| {worst_sum:.1e}; lambda=1 ignores IoF: {ignores}; "
            f"first-draw max deviation {dev:.4f} over 1e5 draws; default lambda {lam}")


# -- 7 ---------------------------------------------------------------------------

def test_anchors(capsys):
    monotone = True
    for seed in range(20):
        wh = np.exp(np.random.default_rng(seed).uniform(np.log(2), np.log(40), size=(150, 2)))
        hist = kmeans_wh(wh, 4, seed)[2]
        monotone &= all(b <= a for a, b in zip(hist, hist[1:]))
    rng = np.random.default_rng(0)
    centres = np.array([[3.0, 6.0], [7.0, 13.0], [18.0, 30.0]])
    wh = np.concatenate([c * np.exp(rng.normal(0, 0.08, size=(60, 2))) for c in centres])
    boxes = [GtBox(0, 0, float(w), float(h)) for w, h in wh]
    km = mean_best_iou(wh, kmeans_anchors(boxes, 4))
    ladder = mean_best_iou(wh, geometric_ladder())
    ok = monotone and km > ladder
    verdict(capsys, "anchors", ok, f"objective non-increasing: {monotone}; mean best IoU k-means {km:.4f} "
            f"vs ladder {ladder:.4f}")


# -- 8 ---------------------------------------------------------------------------

def test_metrics_oracle(capsys):
    mismatches = 0
    for seed in range(500):
        rng = np.random.default_rng(seed)
        boxes, gts = random_instance(rng)
        thr = float(rng.choice([0.25, 0.5, 0.75]))
        flags, matched = match_detections(boxes, gts, thr)
        want_f, want_m = brute_match(boxes, gts, thr)
        n = sum(not g.ignore for g in gts)
        got, want = average_precision(flags, n), brute_ap(want_f, n)
        same_ap = (got is None and want is None) or (got is not None and want is not None and abs(got - want) < 1e-12)
        mismatches += flags.tolist() != want_f or matched.tolist() != want_m or not same_ap
    dets, gts = golden_instance()
    first = evaluate(dets, gts).to_json()
    stable = first == json.loads(GOLDEN.read_text()) == evaluate(dets, gts).to_json()
    want = brute_evaluate(dets, gts, (0.25, 0.5, 0.75), ("tiny", "tiny1", "tiny2", "tiny3", "small"), in_partition)
    stable &= all(row["AP"] == want[(row["iou"], row["partition"])]["AP"] for row in first["results"])
    ok = mismatches == 0 and stable
    verdict(capsys, "metrics oracle", ok, f"{mismatches}/500 random instances differ from brute force; "
            f"golden report stable: {stable}")


# -- 9 ---------------------------------------------------------------------------

HELD_OUT = 40


def test_directional_end_to_end(capsys):
    base_cfg = load_config(DIRECTIONAL)
    assert base_cfg["data.n_images"] <= 20 and base_cfg["optim.epochs"] <= 5
    start = time.perf_counter()
    wins, rows = 0, []
    for seed in range(5):
        cfg = base_cfg.replace(seed=seed)
        train = gen_synthetic(cfg.synth(), seed, "train")
        test = gen_synthetic(cfg.replace(**{"data.n_images": HELD_OUT}).synth(), seed, "test")
        ap = {}
        for neck in ("baseline", "sspnet"):
            params = cfg.replace(**{"model.neck": neck}).detector_params()
            model = SSPNetDetector(**params).fit(np.array(train.images), train.annotations)
            ap[neck] = model.score(np.array(test.images), test.annotations)
        wins += ap["sspnet"] >= ap["baseline"]
        rows.append(f"{seed}:{ap['baseline']:.3f}/{ap['sspnet']:.3f}")
    minutes = (time.perf_counter() - start) / 60
    ok = wins >= 4 and minutes < 10
    verdict(capsys, "directional end-to-end", ok,
            f"sspnet >= baseline AP50-tiny in {wins}/5 seeds (baseline/sspnet {' '.join(rows)}), {minutes:.1f} min")


# -- 10 --------------------------------------------------------------------------

def _tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def _run_all(root: Path, capsys) -> dict:
    small = ["--seed", "3", "--data.n_images=3", "--optim.epochs=1"]
    outputs = {}

    def cli(name, *argv):
        code = main([str(a) for a in argv])
        outputs[name] = (code, capsys.readouterr().out.replace(str(root), "<root>"))

    cli("gen-synth", "gen-synth", "--out", root / "data", *small)
    cli("anchors-kmeans", "anchors-kmeans", "--data", root / "data", "--k", 3, "--out", root / "anchors.json", *small)
    cli("train-toy", "train-toy", "--out", root / "ck", "--data", root / "data", "--val", root / "data", *small)
    cli("eval", "eval", "--checkpoint", root / "ck", "--data", root / "data", "--out", root / "report.json",
        "--detections", root / "dets.jsonl", "--heatmaps", root / "heat", *small)
    cli("gradcheck", "gradcheck", "--seeds", 2, "--cases", "sigmoid,conv2d_input,ssm_p", *small)
    cli("grad-consistency", "grad-consistency", "--seeds", 5, "--out", root / "gc.json", *small)
    outputs["files"] = _tree(root)
    return outputs


def test_cli_determinism(capsys, tmp_path):
    a = _run_all(tmp_path / "a", capsys)
    b = _run_all(tmp_path / "b", capsys)
    names = [n for n in a if n != "files"]
    codes = all(a[n][0] == 0 for n in names)
    same = [n for n in names if a[n] == b[n]]
    files_same = a["files"] == b["files"]
    ok = codes and len(same) == len(names) and files_same
    verdict(capsys, "CLI determinism", ok, f"{len(same)}/{len(names)} subcommands reproduce stdout and exit code; "
            f"{len(a['files'])} output files byte-identical: {files_same}")
