import json
from pathlib import Path

import pytest

from sspnet.cli import main

SMALL = ["--data.n_images=2", "--optim.epochs=1"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-synth", "--out", str(root / "data"), "--seed", "1", *SMALL]) == 0
    assert main(["train-toy", "--out", str(root / "ck"), "--data", str(root / "data"), "--val",
                 str(root / "data"), "--seed", "1", *SMALL]) == 0
    return root


def test_version_and_usage(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "sspnet" in capsys.readouterr().out
    code, _, err = run(capsys, "frobnicate")
    assert code == 1 and "usage" in err
    code, _, err = run(capsys)
    assert code == 1 and "gen-synth" in err


def test_gen_synth_deterministic(capsys, tmp_path):
    for name in ("a", "b"):
        assert run(capsys, "gen-synth", "--out", tmp_path / name, "--seed", 5, *SMALL)[0] == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    run(capsys, "gen-synth", "--out", tmp_path / "c", "--seed", 6, *SMALL)
    assert tree_bytes(tmp_path / "a") != tree_bytes(tmp_path / "c")


def test_anchors_kmeans_table(capsys, tmp_path):
    run(capsys, "gen-synth", "--out", tmp_path / "d", "--data.n_images=4")
    outputs = []
    for _ in range(2):
        code, out, _ = run(capsys, "anchors-kmeans", "--data", tmp_path / "d", "--k", 3, "--out", tmp_path / "a.json")
        assert code == 0
        outputs.append(out + (tmp_path / "a.json").read_text())
    assert outputs[0] == outputs[1]
    lines = outputs[0].splitlines()
    assert lines[0].split() == ["#", "width", "height", "area"]
    assert [ln.split()[0] for ln in lines[1:4]] == ["0", "1", "2"]
    assert lines[4].startswith("mean best IoU")
    assert len(json.loads((tmp_path / "a.json").read_text())["anchors"]) == 3


def test_anchors_kmeans_errors(capsys, tmp_path):
    assert run(capsys, "anchors-kmeans", "--data", tmp_path / "none")[0] == 2
    run(capsys, "gen-synth", "--out", tmp_path / "d", "--data.n_images=1")
    assert run(capsys, "anchors-kmeans", "--data", tmp_path / "d", "--k", 500)[0] == 1


def test_train_outputs(trained):
    ck = trained / "ck"
    for name in ("manifest.json", "config.json", "loss.jsonl", "metrics.jsonl"):
        assert (ck / name).exists(), name
    losses = [json.loads(ln) for ln in (ck / "loss.jsonl").read_text().splitlines()]
    assert len(losses) == 2 and {"rpn", "head", "attention", "loss"} <= set(losses[0])
    assert json.loads((ck / "config.json").read_text())["seed"] == 1


def test_train_deterministic(capsys, trained, tmp_path):
    code, _, _ = run(capsys, "train-toy", "--out", tmp_path / "ck", "--data", trained / "data", "--val",
                     trained / "data", "--seed", 1, *SMALL)
    assert code == 0
    assert tree_bytes(tmp_path / "ck") == tree_bytes(trained / "ck")


def test_train_necks_share_defaults(capsys, trained, tmp_path):
    run(capsys, "train-toy", "--neck", "baseline", "--out", tmp_path / "b", "--data", trained / "data",
        "--no-eval", "--seed", 1, *SMALL)
    a = json.loads((trained / "ck" / "config.json").read_text())
    b = json.loads((tmp_path / "b" / "config.json").read_text())
    assert {k for k in a if a[k] != b[k]} == {"model.neck"}


def test_train_rejects_bad_config(capsys, tmp_path):
    assert run(capsys, "train-toy", "--out", tmp_path / "x", "--optim.lr=-1")[0] == 1
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"wns.lambda": 3}))
    assert run(capsys, "train-toy", "--out", tmp_path / "x", "--config", cfg)[0] == 1
    assert run(capsys, "train-toy", "--out", tmp_path / "x", "--config", tmp_path / "missing.json")[0] == 2


def test_eval_deterministic_with_artifacts(capsys, trained, tmp_path):
    blobs = []
    for name in ("a", "b"):
        d = tmp_path / name
        code, _, _ = run(capsys, "eval", "--checkpoint", trained / "ck", "--data", trained / "data", "--out",
                         d / "report.json", "--detections", tmp_path / f"{name}.jsonl", "--heatmaps", d / "heat")
        assert code == 0
        blobs.append(tree_bytes(d) | {"dets": (tmp_path / f"{name}.jsonl").read_bytes()})
    assert blobs[0] == blobs[1]
    assert "heat/00000_A2.pgm" in blobs[0] and "heat/00001_A5.pgm" in blobs[0]
    report = json.loads(blobs[0]["report.json"])
    assert len(report["results"]) == 15
    for line in blobs[0]["dets"].decode().splitlines():
        assert set(json.loads(line)) == {"image_id", "bbox", "score"}


def test_eval_empty_dataset(capsys, trained, tmp_path):
    (tmp_path / "empty").mkdir()
    (tmp_path / "empty" / "annotations.json").write_text(json.dumps({"images": [], "annotations": []}))
    code, out, _ = run(capsys, "eval", "--checkpoint", trained / "ck", "--data", tmp_path / "empty")
    assert code == 0 and json.loads(out) == {"results": []}


def test_eval_bad_checkpoint(capsys, trained, tmp_path):
    assert run(capsys, "eval", "--checkpoint", tmp_path / "nothing", "--data", trained / "data")[0] == 2


def test_gradcheck_subset(capsys):
    outs = [run(capsys, "gradcheck", "--seeds", 2, "--cases", "sigmoid,softmax") for _ in range(2)]
    assert outs[0][0] == 0
    assert outs[0][1].count("ok") == 2
    assert outs[0][1] == outs[1][1]
    assert outs[0][1].splitlines()[-1] == "2 cases, 0 failing"
    assert run(capsys, "gradcheck", "--cases", "nope")[0] == 1


def test_grad_consistency_deterministic(capsys, tmp_path):
    codes = []
    for name in ("a", "b"):
        code, out, _ = run(capsys, "grad-consistency", "--seeds", 5, "--seed", 3, "--out", tmp_path / f"{name}.json")
        codes.append(code)
    assert codes == [0, 0]
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    summary = json.loads((tmp_path / "a.json").read_text())["summary"]
    assert summary["max_residual"] < 1e-9 and summary["baseline_sign_conflicts"] == 5
