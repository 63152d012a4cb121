import json

import numpy as np
import pytest

from fkdsim.cli import main
from fkdsim.preprocess import normalize, read_pgm, resize_bilinear, to_levels, write_pgm

SMALL = """[experiment]
rounds = 2
local_epochs = 1
[data]
per_class = 15
height = 12
width = 12
[partition]
num_clients = {clients}
dirichlet_alpha = {alpha}
[optimizer]
learning_rate = 0.05
[student_optimizer]
learning_rate = 0.05
"""


def _config(tmp_path, name="c.ini", clients=2, alpha=10000, extra=""):
    path = tmp_path / name
    path.write_text(SMALL.format(clients=clients, alpha=alpha) + extra)
    return str(path)


def _run(tmp_path, protocol, cfg, out="runs", *more):
    code = main([f"run-{protocol}", "--config", cfg, "--out", str(tmp_path / out), *more])
    dirs = sorted((tmp_path / out).glob(f"{protocol}-*"))
    return code, dirs


def test_run_fkd_writes_artifacts(tmp_path, capsys):
    code, dirs = _run(tmp_path, "fkd", _config(tmp_path))
    assert code == 0 and len(dirs) == 1
    names = {p.name for p in dirs[0].iterdir()}
    assert {"config.json", "report.json", "rounds.csv", "ledger.csv", "partition.csv", "checkpoint"} <= names
    doc = json.loads((dirs[0] / "report.json").read_text())
    assert len(doc["rounds"]) == 2 and doc["protocol"] == "fkd"
    assert dirs[0].name.endswith("-seed0")


def test_rerun_is_noop_and_force_is_identical(tmp_path, capsys):
    cfg = _config(tmp_path)
    _, dirs = _run(tmp_path, "fkd", cfg)
    first = (dirs[0] / "report.json").read_bytes()
    code, _ = _run(tmp_path, "fkd", cfg)
    assert code == 0 and "already complete" in capsys.readouterr().out
    code, _ = _run(tmp_path, "fkd", cfg, "runs", "--force")
    assert code == 0 and (dirs[0] / "report.json").read_bytes() == first
    code, other = _run(tmp_path, "fkd", cfg, "threaded", "--threads", "2")
    assert (other[0] / "report.json").read_bytes() == first


def test_seed_flag_changes_run_dir(tmp_path):
    _, dirs = _run(tmp_path, "fkd", _config(tmp_path), "runs", "--seed", "3")
    assert dirs[0].name.endswith("-seed3")


def test_bad_alpha_exit_1(tmp_path, capsys):
    cfg = _config(tmp_path, extra="[distill]\nalpha = 1.5\n")
    assert main(["run-fkd", "--config", cfg, "--out", str(tmp_path)]) == 1
    assert "distill.alpha" in capsys.readouterr().err


def test_missing_dataset_exit_1(tmp_path, capsys):
    cfg = _config(tmp_path, extra="")
    text = open(cfg).read().replace("[data]\n", "[data]\nsource = manifest\nmanifest = nowhere/manifest.csv\n")
    open(cfg, "w").write(text)
    assert main(["run-fedavg", "--config", cfg, "--out", str(tmp_path)]) == 1
    assert "nowhere" in capsys.readouterr().err


def test_run_fedavg_ledger_kind(tmp_path):
    code, dirs = _run(tmp_path, "fedavg", _config(tmp_path))
    assert code == 0
    doc = json.loads((dirs[0] / "report.json").read_text())
    assert {e["kind"] for e in doc["ledger"]} == {"parameters"}


def _table(out):
    lines = [l for l in out.splitlines() if " | " in l]
    return [[c.strip() for c in l.split("|")] for l in lines[1:]]


def test_compare(tmp_path, capsys):
    cfg = _config(tmp_path)
    _, fkd = _run(tmp_path, "fkd", cfg)
    _, fed = _run(tmp_path, "fedavg", cfg)
    a, b = str(fkd[0] / "report.json"), str(fed[0] / "report.json")
    capsys.readouterr()
    assert main(["compare", a, a]) == 0
    rows = _table(capsys.readouterr().out)
    assert rows[0] == rows[1]
    assert main(["compare", a, b, "--unit", "Mb", "--out", str(tmp_path / "cmp.csv")]) == 0
    rows = _table(capsys.readouterr().out)
    assert float(rows[0][4]) < float(rows[1][4])
    doc = json.loads(open(a).read())
    want = doc["rounds"][0]["upload_bytes"] * 8 / 1e6
    assert rows[0][4] == f"{want:.2f}"
    assert (tmp_path / "cmp.csv").read_text().startswith("Method,")


def test_compare_schema_mismatch(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"schema_version": 0}))
    assert main(["compare", str(bad), str(bad)]) == 1


def _score(out):
    return float(out.strip().splitlines()[-1].rsplit(":", 1)[1])


def test_partition_report(tmp_path, capsys):
    assert main(["partition-report", "--config", _config(tmp_path), "--out", str(tmp_path / "p")]) == 0
    assert _score(capsys.readouterr().out) < 0.1
    assert (tmp_path / "p" / "partition_stats.csv").exists()
    assert main(["partition-report", "--config", _config(tmp_path, "one.ini", clients=1)]) == 0
    assert _score(capsys.readouterr().out) == 0.0


def test_partition_report_alpha_ordering(tmp_path, capsys):
    iid, non = _config(tmp_path, "a.ini", 5, 10000), _config(tmp_path, "b.ini", 5, 0.5)
    wins = 0
    for seed in range(5):
        main(["partition-report", "--config", non, "--seed", str(seed)])
        main(["partition-report", "--config", iid, "--seed", str(seed)])
        out = capsys.readouterr().out.strip().split("heterogeneity")
        wins += float(out[1].rsplit(":", 1)[1].split()[0]) > float(out[2].rsplit(":", 1)[1].split()[0])
    assert wins >= 3


def test_audit_model(capsys, tmp_path):
    assert main(["audit-model", "builtin:student"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert len([l for l in out if l.strip()[:1].isdigit()]) == 14
    assert "Total parameters: 95434" in out and "Trainable parameters: 94986" in out
    assert "Non-trainable parameters: 448" in out
    (tmp_path / "d.spec").write_text("input 7\ndense out_units=4\ndense out_units=2\n")
    assert main(["audit-model", str(tmp_path / "d.spec")]) == 0
    assert "Total parameters: 42" in capsys.readouterr().out
    (tmp_path / "bad.spec").write_text("input 7\n\ndense units=4\n")
    assert main(["audit-model", str(tmp_path / "bad.spec")]) == 1
    assert "line 3" in capsys.readouterr().err


def _pgm_tree(root, rng):
    for label in ("a", "b"):
        (root / label).mkdir(parents=True)
        for i in range(3):
            write_pgm(root / label / f"{i}.pgm", rng.integers(0, 256, size=(20, 24)), 8)


def test_preprocess(tmp_path, rng, capsys):
    src, dst = tmp_path / "in", tmp_path / "out"
    _pgm_tree(src, rng)
    assert main(["preprocess", str(src), str(dst), "--size", "16", "--tiles", "2", "2"]) == 0
    assert len(list(dst.rglob("*.pgm"))) == 6
    assert len((dst / "manifest.csv").read_text().splitlines()) == 7
    plain = tmp_path / "plain"
    assert main(["preprocess", str(src), str(plain), "--size", "16", "--no-clahe"]) == 0
    raw, bits = read_pgm(src / "a" / "0.pgm")
    got, _ = read_pgm(plain / "a" / "0.pgm")
    assert np.array_equal(got, to_levels(resize_bilinear(normalize(raw, bits), (16, 16))))


def test_preprocess_corrupt(tmp_path, rng, capsys):
    src = tmp_path / "in"
    _pgm_tree(src, rng)
    (src / "a" / "broken.pgm").write_bytes(b"P5\n20 20\n255\n\x00\x01")
    assert main(["preprocess", str(src), str(tmp_path / "o")]) == 2
    assert "broken.pgm" in capsys.readouterr().err


def test_gen_synthetic_then_manifest_run(tmp_path, capsys):
    assert main(["gen-synthetic", "--out", str(tmp_path / "syn"), "--per-class", "12", "--size", "12"]) == 0
    cfg = _config(tmp_path)
    text = open(cfg).read().replace("[data]\n", "[data]\nsource = manifest\nmanifest = syn/manifest.csv\n"
                                              "image_size = 12\nchannels = 1\nclahe = false\n")
    open(cfg, "w").write(text)
    code, dirs = _run(tmp_path, "fkd", cfg)
    assert code == 0 and len(dirs) == 1
