import csv
import json

import pytest

from quadlab.cli import ABLATION_VARIANTS, main

TINY = {
    "benchmark": {"train_size": 24, "val_size": 4, "test_size": 8, "novel_size": 8},
    "train": {"epochs": 1, "batch_size": 12, "d_model": 16, "n_heads": 2, "d_ff": 16,
              "fisher_samples": 4, "memory_capacity": 20},
}


@pytest.fixture(scope="module")
def setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "exp.json"
    config.write_text(json.dumps(TINY))
    assert main(["generate", "--config", str(config), "--out", str(root / "bench")]) == 0
    return root, config


def rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_generate_manifest_and_determinism(setup, tmp_path):
    root, config = setup
    manifest = json.loads((root / "bench" / "manifest.json").read_text())
    assert len(manifest["subtasks"]) == 25
    assert main(["generate", "--config", str(config), "--out", str(tmp_path / "again")]) == 0
    again = json.loads((tmp_path / "again" / "manifest.json").read_text())
    assert again["files"] == manifest["files"]


def test_generate_rejects_bad_fold(setup, tmp_path, capsys):
    _, config = setup
    assert main(["generate", "--config", str(config), "--fold", "5", "--out", str(tmp_path)]) != 0
    assert "fold" in capsys.readouterr().err


def test_run_without_benchmark_fails_cleanly(tmp_path, capsys):
    assert main(["run", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) != 0
    assert "quadlab generate" in capsys.readouterr().err
    assert main(["run", "--out", str(tmp_path / "o")]) != 0


def test_unknown_method_rejected(setup, capsys):
    root, config = setup
    assert main(["run", "--config", str(config), "--data", str(root / "bench"), "--methods", "magic"]) != 0
    assert "magic" in capsys.readouterr().err


def test_run_writes_artifacts(setup):
    root, config = setup
    out = root / "runs"
    code = main(["run", "--config", str(config), "--data", str(root / "bench"),
                 "--methods", "vanilla,quad", "--out", str(out)])
    assert code == 0
    for m in ("vanilla", "quad"):
        d = out / m / "seed0"
        assert {"matrix.csv", "losses.csv", "metrics.json", "manifest.json"} <= {p.name for p in d.iterdir()}
    bench_hash = json.loads((out / "quad" / "seed0" / "manifest.json").read_text())["benchmark_hash"]
    assert bench_hash == json.loads((out / "vanilla" / "seed0" / "manifest.json").read_text())["benchmark_hash"]


def test_sweep_memory_rows(setup):
    root, config = setup
    out = root / "sweep"
    code = main(["sweep-memory", "--config", str(config), "--data", str(root / "bench"),
                 "--memory-sizes", "10,20", "--selection", "random,object_matched", "--out", str(out)])
    assert code == 0
    got = rows(out / "memory_sweep.csv")
    assert len(got) == 4
    assert [int(r["memory"]) for r in got if r["selection"] == "random"] == [10, 20]


def test_ablate_rows(setup):
    root, config = setup
    out = root / "ablate"
    assert main(["ablate", "--config", str(config), "--data", str(root / "bench"), "--out", str(out)]) == 0
    got = rows(out / "ablation.csv")
    assert [r["variant"] for r in got] == list(ABLATION_VARIANTS)
    assert [r["variant"] for r in got if r["reference"] == "1"] == ["quad"]
    assert (out / "experiment.json").exists()


def test_matrix_files(setup):
    root, config = setup
    out = root / "matrix"
    assert main(["matrix", "--config", str(config), "--data", str(root / "bench"), "--out", str(out)]) == 0
    for m in ("vanilla", "quad_pl_only", "quad"):
        lines = (out / f"matrix_{m}.csv").read_text().splitlines()
        assert len(lines) == 6
