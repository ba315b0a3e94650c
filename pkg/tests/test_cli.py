import csv
import hashlib
import json
import xml.etree.ElementTree as ET
from pathlib import Path

import pytest

from diamondseg.cli import COMMANDS, main
from diamondseg.imaging import read_dataset


def tree_hash(root: Path) -> str:
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Raw runs -> processed 64px dataset -> one small trained model."""
    out = tmp_path_factory.mktemp("cli")
    spec = out / "spec.ini"
    spec.write_text("[synth]\nlateral_growth_rate = 0.1\npcd_encroachment_rate = 0.01\nblackout_frame_prob = 0.1\n")
    assert main(["--out", str(out), "--seed", "3", "synth", "--spec", str(spec), "--runs", "3",
                 "--frames", "150", "--name", "raw"]) == 0
    assert main(["--out", str(out), "preprocess", "--input", str(out / "datasets/raw"), "--name", "proc"]) == 0
    assert main(["--out", str(out), "--seed", "1", "--deterministic", "train", "--dataset", str(out / "datasets/proc"),
                 "--base-width", "4", "--epochs", "2", "--batch-size", "8", "--lr", "3e-4", "--name", "m"]) == 0
    return out


def test_help_for_every_command(capsys):
    assert main(["--help"]) == 0
    for name in COMMANDS:
        assert main([name, "--help"]) == 0
        assert "--seed" in capsys.readouterr().out


def test_usage_errors(tmp_path):
    assert main(["--out", str(tmp_path), "synth"]) == 2  # missing seed
    assert main(["--out", str(tmp_path), "--seed", "1", "synth", "--frames", "0"]) == 2
    assert main(["--out", str(tmp_path), "--seed", "1", "train", "--dataset", str(tmp_path / "none")]) == 2
    assert main(["--out", str(tmp_path), "--config", str(tmp_path / "none.ini"), "--seed", "1", "synth"]) == 2
    assert main(["bogus"]) == 2


def test_synth_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["--out", str(tmp_path / name), "--seed", "9", "synth", "--frames", "5"]) == 0
    a, b = tmp_path / "a/datasets/synth", tmp_path / "b/datasets/synth"
    assert (a / "manifest.jsonl").exists()
    assert tree_hash(a) == tree_hash(b)
    assert main(["--out", str(tmp_path / "c"), "--seed", "9", "--seed", "10", "synth", "--frames", "5"]) == 0
    assert tree_hash(tmp_path / "c/datasets/synth") != tree_hash(a)


def test_preprocess_outputs(workspace):
    rejects = read_csv(workspace / "reports/proc_rejects.csv")
    raw = {s.id: s.image for s in read_dataset(workspace / "datasets/raw")}
    assert rejects and all(raw[r["id"]].max() == 0 and r["reason"] == "blackout" for r in rejects)
    tags = [s.split_tag for s in read_dataset(workspace / "datasets/proc")]
    assert set(tags) == {"train", "test"}


def test_train_and_eval(workspace):
    history = read_csv(workspace / "reports/m_history.csv")
    assert [int(r["epoch"]) for r in history] == [1, 2] and {r["seconds"] for r in history} == {"0"}
    assert (workspace / "models/m.dsgw").exists() and (workspace / "models/m.json").exists()
    rc = main(["--out", str(workspace), "eval", "--weights", str(workspace / "models/m.dsgw"),
               "--dataset", str(workspace / "datasets/proc")])
    assert rc == 0
    row = read_csv(workspace / "reports/m_eval.csv")[0]
    assert {"pocket_holder", "diamond_top", "diamond_side", "miou"} <= set(row)
    report = json.loads((workspace / "reports/m_eval.json").read_text())
    assert report


def test_features_modes(workspace):
    raw = str(workspace / "datasets/raw")
    assert main(["--out", str(workspace), "features", "--run", raw, "--svg", "--name", "gt"]) == 0
    assert main(["--out", str(workspace), "features", "--run", raw, "--weights", str(workspace / "models/m.dsgw"),
                 "--name", "pred"]) == 0
    gt, pred = read_csv(workspace / "reports/gt.csv"), read_csv(workspace / "reports/pred.csv")
    assert list(gt[0]) == list(pred[0]) and len(gt) == len(pred) == 450
    assert any("blackout" in r["flags"] for r in gt)
    svgs = sorted((workspace / "reports").glob("gt_*.svg"))
    assert len(svgs) == 3
    assert ET.parse(svgs[0]).getroot().tag.endswith("svg")


PIPE = ("[pipeline]\nresolution = 32\nbase_width = 8\nbatch_size = 20\nepochs_per_round = 4\n"
        "train_batch_size = 4\nmax_iterations = 2\nbaseline_threshold = {t}\nfinal_threshold = 0.99\nsal_max_rounds = 1\n")


def test_pipeline_command(tmp_path):
    cfg = tmp_path / "p.ini"
    cfg.write_text(PIPE.format(t=0.3))
    args = ["--config", str(cfg), "--seed", "1", "--deterministic", "pipeline", "--samples", "60"]
    assert main(["--out", str(tmp_path / "a")] + args) == 0
    for rel in ("logs/audit.jsonl", "reports/effort.csv", "reports/relabel.csv", "reports/pipeline_summary.json",
                "models/store/LATEST"):
        assert (tmp_path / "a" / rel).exists()
    assert main(["--out", str(tmp_path / "b")] + args) == 0
    assert (tmp_path / "a/logs/audit.jsonl").read_bytes() == (tmp_path / "b/logs/audit.jsonl").read_bytes()


def test_pipeline_shortfall_exit(tmp_path):
    cfg = tmp_path / "p.ini"
    cfg.write_text(PIPE.format(t=0.99).replace("max_iterations = 2", "max_iterations = 1"))
    rc = main(["--out", str(tmp_path), "--config", str(cfg), "--seed", "1", "pipeline", "--samples", "40"])
    assert rc == 3
    assert json.loads((tmp_path / "reports/pipeline_summary.json").read_text())["exhausted"]


def test_grid_command(tmp_path):
    cfg = tmp_path / "g.ini"
    cfg.write_text("[grid]\nresolutions = 32, 64\nbase_samples = 20\nframes_per_run = 10\nepochs = 1\n"
                   "base_width = 4\nbatch_size = 10\n")
    assert main(["--out", str(tmp_path), "--config", str(cfg), "--seed", "0", "--deterministic", "grid"]) == 0
    rows = read_csv(tmp_path / "reports/grid.csv")
    assert len(rows) == 18 and all(r["status"] == "ok" for r in rows)
    assert sorted({int(r["rate"]) for r in rows}) == [2, 5, 10]
    trend = json.loads((tmp_path / "reports/grid_trend.json").read_text())
    assert len(trend) == 6 and all("larger_dataset_better" in v for v in trend.values())
