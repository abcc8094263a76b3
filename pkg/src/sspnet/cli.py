"""Command-line entry point: ``sspnet <subcommand> [options] [--key=value ...]``.

Exit codes: 0 success, 1 validation error or bad usage, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .anchors import GtBox, kmeans_anchors, mean_best_iou
from .config import ExperimentConfig, load_config, parse_overrides
from .data import Dataset, gen_synthetic, load_dataset, save_dataset, write_pgm
from .detector import SSPNetDetector
from .errors import CheckpointError, DataError
from .rng import Streams

logger = logging.getLogger("sspnet")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _config(args, overrides) -> ExperimentConfig:
    extra = dict(overrides)
    if getattr(args, "seed", None) is not None:
        extra["seed"] = args.seed
    if getattr(args, "neck", None) is not None:
        extra["model.neck"] = args.neck
    return load_config(args.config, extra)


def _dump_json(obj, path) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path in (None, "-"):
        print(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text + "\n")


# -- subcommands -------------------------------------------------------------

def cmd_gen_synth(args, cfg: ExperimentConfig) -> int:
    ds = gen_synthetic(cfg.synth(), cfg["seed"], args.stream)
    path = save_dataset(ds, args.out)
    n = sum(len(a) for a in ds.annotations)
    print(f"wrote {len(ds)} images, {n} boxes -> {path}")
    return EXIT_OK


def _boxes_from(path) -> list[GtBox]:
    ds_path = Path(path)
    from .data import load_annotations
    _, by_id = load_annotations(ds_path / "annotations.json" if ds_path.is_dir() else ds_path)
    return [b for boxes in by_id.values() for b in boxes if not b.ignore]


def cmd_anchors_kmeans(args, cfg: ExperimentConfig) -> int:
    boxes = _boxes_from(args.data)
    if args.k < 1:
        raise DataError("--k must be at least 1")
    if len(boxes) < args.k:
        raise DataError(f"{len(boxes)} boxes cannot form {args.k} clusters")
    seed = Streams(cfg["seed"]).seed_for("anchors")
    anchors = kmeans_anchors(boxes, args.k, seed=seed)
    wh = np.array([[b.w, b.h] for b in boxes])
    print(f"{'#':>3}{'width':>10}{'height':>10}{'area':>10}")
    for i, (w, h) in enumerate(anchors):
        print(f"{i:>3}{w:>10.3f}{h:>10.3f}{w * h:>10.2f}")
    print(f"mean best IoU {mean_best_iou(wh, np.array(anchors)):.4f} over {len(boxes)} boxes")
    if args.out:
        _dump_json({"k": args.k, "seed": cfg["seed"], "anchors": [list(a) for a in anchors]}, args.out)
    return EXIT_OK


def _dataset(path, cfg: ExperimentConfig, stream: str) -> Dataset:
    if path:
        return load_dataset(path)
    return gen_synthetic(cfg.synth(), cfg["seed"], stream)


def cmd_train_toy(args, cfg: ExperimentConfig) -> int:
    train = _dataset(args.data, cfg, "train")
    val = _dataset(args.val, cfg, "val") if (args.val or not args.data) else None
    if not len(train):
        raise DataError("training set is empty")
    model = SSPNetDetector(**cfg.detector_params())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = []

    def per_epoch(m, epoch):
        if val is None or args.no_eval:
            return
        rep = m.evaluate(np.array(val.images), val.annotations, val.ids)
        ap = rep.get("AP", 0.5, "tiny") if rep.entries else None
        reports.append({"epoch": epoch, **rep.to_json()})
        print(f"epoch {epoch}: AP50 tiny {'-' if ap is None else f'{100 * ap:.2f}'}")

    model.fit(np.array(train.images), train.annotations, callback=per_epoch)
    model.save(out)
    (out / "config.json").write_text(cfg.dumps() + "\n")
    with open(out / "loss.jsonl", "w") as fh:
        for rec in model.history_:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    if reports:
        with open(out / "metrics.jsonl", "w") as fh:
            for rec in reports:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    first, last = model.history_[0]["loss"], model.history_[-1]["loss"]
    print(f"trained {cfg['model.neck']} for {model.epochs} epochs: loss {first:.4f} -> {last:.4f}; checkpoint {out}")
    return EXIT_OK


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    model = SSPNetDetector.load(args.checkpoint)
    ds = load_dataset(args.data) if args.data else gen_synthetic(cfg.synth(), cfg["seed"], "test")
    if not len(ds):
        report_json = {"results": []}
        _dump_json(report_json, args.out)
        return EXIT_OK
    images = np.array(ds.images)
    dets = model.predict(images, ds.ids)
    flat = [d for per in dets for d in per]
    from .metrics import evaluate
    report = evaluate(flat, ds.gts_by_id())
    if args.detections:
        with open(args.detections, "w") as fh:
            for d in flat:
                fh.write(json.dumps(d.to_json(), sort_keys=True) + "\n")
    if args.heatmaps and model.neck == "sspnet":
        root = Path(args.heatmaps)
        root.mkdir(parents=True, exist_ok=True)
        for img_id, img in zip(ds.ids, images):
            out, _, _ = model._forward(img)
            for k, a in out.attention.maps.items():
                write_pgm(root / f"{img_id:05d}_A{k}.pgm", a.data[0, 0])
    _dump_json(report.to_json(), args.out)
    if args.out not in (None, "-"):
        print(report.table())
    return EXIT_OK


def cmd_gradcheck(args, cfg: ExperimentConfig) -> int:
    from .gradcheck import CASES, run_suite
    names = args.cases.split(",") if args.cases else None
    if names:
        unknown = sorted(set(names) - set(CASES))
        if unknown:
            raise DataError(f"unknown gradcheck cases: {unknown}")
    result = run_suite(seeds=args.seeds, eps=args.eps, names=names, base_seed=cfg["seed"])
    print(result.table())
    print(f"elapsed {result.seconds:.1f}s", file=sys.stderr)  # kept off stdout so reruns compare equal
    return EXIT_OK if result.passed else EXIT_INVALID


def cmd_grad_consistency(args, cfg: ExperimentConfig) -> int:
    from . import grad_consistency as G
    from .backbone import LEVELS
    reports, worst_res, worst_psi = [], 0.0, 0.0
    streams = Streams(cfg["seed"])
    size, ch = args.size, args.channels
    for s in range(args.seeds):
        rng = streams.generator(f"grad-consistency/{s}")
        lat = {k: rng.normal(size=(1, ch, size >> (k - 2), size >> (k - 2))) for k in LEVELS}
        att = {k: rng.uniform(0.05, 0.95, size=(1, 1, size >> (k - 2), size >> (k - 2))) for k in LEVELS}
        top = rng.normal(size=(1, ch, size >> 3, size >> 3))
        loc = (int(rng.integers(size)), int(rng.integers(size)))
        labels = {k: int(k == 2) for k in LEVELS} if args.scenario == "level2" else \
            {k: int(rng.integers(2)) for k in LEVELS}
        w = {k: rng.normal(size=ch) for k in LEVELS}
        if args.scenario == "level2":
            # same-signed probes: a positive and a background label then pull in opposite directions
            w = {k: np.abs(v) for k, v in w.items()}
        probe = G.LinearProbe(w, {k: float(rng.normal()) for k in LEVELS})
        rep = G.verify_decomposition(lat, att, top, loc, labels, probe)
        base = G.verify_decomposition(lat, None, top, loc, labels, probe)
        merged = G.controlled_graph(lat, att, top)
        psi_err = max(abs(G.recovered_psi(merged, loc, k) - G.psi(att, loc, k)) for k in LEVELS)
        worst_res, worst_psi = max(worst_res, rep.residual), max(worst_psi, psi_err)
        reports.append({"seed": s, "sspnet": rep.to_json(), "baseline": base.to_json(), "psi_error": psi_err})
    summary = {
        "seeds": args.seeds,
        "max_residual": worst_res,
        "max_psi_error": worst_psi,
        "baseline_sign_conflicts": sum(r["baseline"]["sign_conflict"] for r in reports),
        "mean_conflict_mass": {
            "baseline": float(np.mean([r["baseline"]["conflict_mass"] for r in reports])),
            "sspnet": float(np.mean([r["sspnet"]["conflict_mass"] for r in reports])),
        },
    }
    if args.baseline and args.sspnet and args.data:
        b, sp = SSPNetDetector.load(args.baseline), SSPNetDetector.load(args.sspnet)
        ds = load_dataset(args.data)
        sample = list(zip(ds.images, ds.annotations))[: args.images]
        norm = [((img - 0.35) / 0.2, gts) for img, gts in sample]  # the detector's input scaling
        conflict = G.conflict_report(b.params_, sp.params_, norm, sp.anchor_spec_, sp.pos_thr)
        summary["trained"] = conflict.to_json()
    _dump_json({"summary": summary, "reports": reports}, args.out)
    print(f"controlled graph over {args.seeds} seeds: max |autograd - sum psi*g| = {worst_res:.3e}, "
          f"max psi error = {worst_psi:.3e}")
    print(f"baseline sign conflicts: {summary['baseline_sign_conflicts']}/{args.seeds}; mean conflict mass "
          f"baseline {summary['mean_conflict_mass']['baseline']:.4f}, sspnet {summary['mean_conflict_mass']['sspnet']:.4f}")
    if "trained" in summary:
        t = summary["trained"]
        print(f"trained nets: {t['locations']} locations, conflict ratio < 1 on {100 * t['fraction_reduced']:.1f}%")
    return EXIT_OK if worst_res < 1e-9 and worst_psi < 1e-9 else EXIT_INVALID


# -- wiring ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sspnet", description="Scale-selection pyramid toolkit.",
                epilog="Any config key may be overridden with --key=value, e.g. --optim.lr=0.01.")
    p.add_argument("--version", action="version", version=f"sspnet {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON config with flat dotted keys")
        sp.add_argument("--seed", type=int, help="run seed (overrides the config)")
        sp.add_argument("-v", "--verbose", action="store_true")
        sp.set_defaults(func=fn)
        return sp

    sp = add("gen-synth", cmd_gen_synth, "write a synthetic dataset (PGM images + annotations.json)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--stream", default="train", help="stream label; use distinct labels for train/test")

    sp = add("anchors-kmeans", cmd_anchors_kmeans, "cluster annotation shapes into prior anchors")
    sp.add_argument("--data", required=True, help="dataset directory or annotations.json")
    sp.add_argument("--k", type=int, default=4)
    sp.add_argument("--out")

    sp = add("train-toy", cmd_train_toy, "train the toy detector and write a checkpoint")
    sp.add_argument("--neck", choices=("baseline", "sspnet"))
    sp.add_argument("--data", help="training dataset directory (default: generate)")
    sp.add_argument("--val", help="held-out dataset evaluated after every epoch")
    sp.add_argument("--out", required=True, help="checkpoint directory")
    sp.add_argument("--no-eval", action="store_true")

    sp = add("eval", cmd_eval, "evaluate a checkpoint on a dataset")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", help="dataset directory (default: generate a test split)")
    sp.add_argument("--out", help="report JSON path (default: stdout)")
    sp.add_argument("--detections", help="write detections as JSON lines")
    sp.add_argument("--heatmaps", help="directory for attention heatmap PGMs")

    sp = add("gradcheck", cmd_gradcheck, "finite-difference check of every primitive and block")
    sp.add_argument("--seeds", type=int, default=100)
    sp.add_argument("--eps", type=float, default=1e-5)
    sp.add_argument("--cases", help="comma-separated subset of case names")

    sp = add("grad-consistency", cmd_grad_consistency, "per-level gradient decomposition report")
    sp.add_argument("--seeds", type=int, default=100)
    sp.add_argument("--size", type=int, default=16, help="finest-level map size")
    sp.add_argument("--channels", type=int, default=4)
    sp.add_argument("--scenario", choices=("level2", "random"), default="level2")
    sp.add_argument("--baseline", help="baseline checkpoint for the trained conflict report")
    sp.add_argument("--sspnet", help="sspnet checkpoint for the trained conflict report")
    sp.add_argument("--data", help="dataset sampled by the trained conflict report")
    sp.add_argument("--images", type=int, default=10)
    sp.add_argument("--out", help="report JSON path (default: stdout)")
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    overrides, rest = parse_overrides(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(rest)
        if args.command is None:
            raise UsageError(parser.format_help())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _config(args, overrides)
        return args.func(args, cfg)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except (CheckpointError, OSError) as exc:
        print(f"sspnet: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DataError, ValueError, KeyError) as exc:
        print(f"sspnet: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
