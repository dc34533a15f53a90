import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from nckd.cli import main
from nckd.data import load_csv
from nckd.model import Mlp
from nckd.trainer import DistillConfig, Teacher, distill, extract_teacher_centroids

TEACHER_CFG = {
    "seed": 0,
    "data": {"kind": "mixture", "k": 3, "d": 6, "n_per_class": 30, "center_separation": 5.0},
    "hidden": [16, 16],
    "train": {"epochs": 3, "batch_size": 16},
}


def _write(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def teacher_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _write(root / "teacher.json", TEACHER_CFG)
    assert main(["train-teacher", "--config", cfg, "--out", str(root / "t")]) == 0
    return root / "t"


def _distill_cfg(tmp_path, teacher_dir, **extra):
    doc = {"teacher": str(teacher_dir), "hidden": [8], "train": {"epochs": 3, "batch_size": 16}, **extra}
    return _write(tmp_path / "distill.json", doc)


def test_teacher_artifacts(teacher_dir):
    names = {p.name for p in teacher_dir.iterdir()}
    expected = {
        "config.json", "train.csv", "test.csv", "centroids.json", "train_log.jsonl",
        "dataset_manifest.json", "teacher.json", "manifest.json",
    }
    assert expected <= names
    manifest = json.loads((teacher_dir / "manifest.json").read_text())
    assert manifest["command"] == "train-teacher"
    assert set(manifest["outputs"]) == expected - {"manifest.json"}
    lines = (teacher_dir / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 3 and json.loads(lines[0])["epoch"] == 1
    train, test = load_csv(teacher_dir / "train.csv"), load_csv(teacher_dir / "test.csv")
    assert train.n + test.n == 90


def test_unknown_key_exit_2(tmp_path, capsys):
    cfg = _write(tmp_path / "c.json", {**TEACHER_CFG, "train": {"epochs": 1, "learning_rate": 0.1}})
    assert main(["train-teacher", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "learning_rate" in capsys.readouterr().err


@pytest.mark.parametrize(
    "doc",
    [
        {"train": {"epochs": -1}},
        {"data": {"kind": "mixture", "k": 10, "d": 5}},
        {"hidden": []},
    ],
)
def test_bad_values_exit_2(tmp_path, doc):
    cfg = _write(tmp_path / "c.json", {**TEACHER_CFG, **doc})
    assert main(["train-teacher", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_malformed_json_exit_2(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    assert main(["train-teacher", "--config", str(p), "--out", str(tmp_path / "o")]) == 2


def test_missing_out_exit_2(tmp_path):
    cfg = _write(tmp_path / "c.json", TEACHER_CFG)
    assert main(["train-teacher", "--config", cfg]) == 2


def test_missing_files_exit_3(tmp_path, teacher_dir):
    assert main(["train-teacher", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path)]) == 3
    cfg = _write(tmp_path / "d.json", {"teacher": str(tmp_path / "nowhere")})
    assert main(["distill", "--config", cfg, "--out", str(tmp_path / "s")]) == 3
    assert main(["metrics", "--checkpoint", str(tmp_path / "no.json"), "--data", str(teacher_dir / "test.csv")]) == 3


def test_malformed_csv_exit_3(tmp_path, teacher_dir):
    bad = tmp_path / "bad.csv"
    bad.write_text("label,f0\n0,1.0\n1,oops\n")
    code = main(["metrics", "--checkpoint", str(teacher_dir / "teacher.json"), "--data", str(bad)])
    assert code == 3


def test_distill_artifacts_and_determinism(tmp_path, teacher_dir):
    cfg = _distill_cfg(tmp_path, teacher_dir)
    for run in ("a", "b"):
        assert main(["distill", "--config", cfg, "--out", str(tmp_path / run), "--variant", "full"]) == 0
    a = json.loads((tmp_path / "a" / "manifest.json").read_text())
    b = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert a == b
    assert set(a["outputs"]) == {"config.json", "train_log.jsonl", "nc_report.json", "student.json"}
    report = json.loads((tmp_path / "a" / "nc_report.json").read_text())
    assert report["split"] == "test" and report["variant"] == "full"
    assert set(report["nc"]) >= {"nc1", "nc2", "nc3"}


def test_seed_flag_changes_run(tmp_path, teacher_dir):
    cfg = _distill_cfg(tmp_path, teacher_dir)
    main(["distill", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["distill", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "7"])
    sa = (tmp_path / "a" / "student.json").read_text()
    sb = (tmp_path / "b" / "student.json").read_text()
    assert sa != sb


def test_variant_plain_matches_zero_weight_training(tmp_path, teacher_dir):
    cfg = _distill_cfg(tmp_path, teacher_dir, weights={"lambda1": 2.0, "alpha": 0.5})
    assert main(["distill", "--config", cfg, "--out", str(tmp_path / "p"), "--variant", "plain"]) == 0
    cli_model = Mlp.load(tmp_path / "p" / "student.json")
    tmodel = Mlp.load(teacher_dir / "teacher.json")
    train = load_csv(teacher_dir / "train.csv")
    teacher = Teacher(tmodel, extract_teacher_centroids(tmodel, train))
    from nckd.losses import LossWeights

    ref, _ = distill(teacher, DistillConfig(LossWeights(0.0, 0.0, 0.0), epochs=3, batch_size=16), train, (8,))
    np.testing.assert_array_equal(cli_model.forward(train.X).logits, ref.forward(train.X).logits)
    resolved = json.loads((tmp_path / "p" / "config.json").read_text())["resolved_train"]
    assert resolved["weights"]["lambda1"] == 0.0 and resolved["weights"]["alpha"] == 0.0


def test_timing_sidecar(tmp_path, teacher_dir):
    cfg = _distill_cfg(tmp_path, teacher_dir)
    assert main(["distill", "--config", cfg, "--out", str(tmp_path / "t"), "--timing"]) == 0
    rows = [json.loads(l) for l in (tmp_path / "t" / "timing.jsonl").read_text().splitlines()]
    assert len(rows) == 3 and all(r["secs"] > 0 for r in rows)
    log = [json.loads(l) for l in (tmp_path / "t" / "train_log.jsonl").read_text().splitlines()]
    assert all(r["secs"] is None for r in log)


def test_metrics_json_and_pca(tmp_path, teacher_dir, capsys):
    out = tmp_path / "m"
    code = main(["metrics", "--checkpoint", str(teacher_dir / "teacher.json"), "--data", str(teacher_dir / "test.csv"),
                 "--out", str(out), "--pca"])
    assert code == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed == json.loads((out / "nc_report.json").read_text())
    with open(out / "pca.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["label", "pc1", "pc2"]
    assert len(rows) == 1 + load_csv(teacher_dir / "test.csv").n
    assert main(["metrics", "--checkpoint", str(teacher_dir / "teacher.json"), "--data",
                 str(teacher_dir / "test.csv"), "--pca"]) == 2


def test_verify_etf_exit_0(capsys):
    assert main(["verify", "--suite", "etf"]) == 0
    out = capsys.readouterr().out
    assert "all 15 checks passed" in out


def test_bad_thread_env(monkeypatch):
    monkeypatch.setenv("NCKD_THREADS", "zero")
    assert main(["verify", "--suite", "etf"]) == 2


def test_console_script_entry():
    proc = subprocess.run([sys.executable, "-m", "nckd.cli", "verify", "--suite", "etf"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.startswith("PASS")
