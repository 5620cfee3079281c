import json
import os

import pandas as pd
import pytest

from cleaning import make_planted_corpus
from run import C_EXIT_NUMERICAL, C_EXIT_OK, C_EXIT_USAGE, main
from utils.utils import manifest_hash, read_json


def train_args(config, out, run, *extra):
    return ["train", "--config", config, "--out", out, "--run", run, "--seed", "1", *extra]


@pytest.fixture
def trained(tmp_path, tiny_config_file):
    out = str(tmp_path / "runs")
    assert main(train_args(tiny_config_file, out, "dual")) == C_EXIT_OK
    return tiny_config_file, out


def read_bytes(path):
    with open(path, "rb") as f:
        return f.read()


def test_train_writes_run_directory(trained):
    _, out = trained
    run_dir = os.path.join(out, "dual")
    manifest = read_json(os.path.join(run_dir, "manifest.json"))
    assert [e["epoch"] for e in manifest["epochs"]] == [1, 2]
    assert manifest["seeds"] == {"world": 0, "train": 1, "ntrain": None}
    for entry in manifest["epochs"]:
        assert os.path.exists(os.path.join(run_dir, entry["path"]))
    best = read_json(os.path.join(run_dir, "checkpoints", "best.json"))
    assert best["epoch"] == manifest["best_epoch"]
    assert os.path.exists(os.path.join(run_dir, "params.json"))
    assert len(pd.read_csv(os.path.join(run_dir, "reports", "validation.csv"))) == 2


def test_rerun_gives_same_manifest(trained):
    config, out = trained
    assert main(train_args(config, out, "again")) == C_EXIT_OK
    a = read_json(os.path.join(out, "dual", "manifest.json"))
    b = read_json(os.path.join(out, "again", "manifest.json"))
    assert manifest_hash(a) == manifest_hash(b)


def test_eval_reports_are_deterministic(trained):
    config, out = trained
    args = ["eval", "--config", config, "--out", out, "--run", "dual"]
    assert main(args) == C_EXIT_OK
    reports = os.path.join(out, "dual", "reports")
    icd = os.path.join(reports, "eval_icd_p90.json")
    fr = os.path.join(reports, "eval_fr_p90_individuals.csv")
    first = read_bytes(icd), read_bytes(fr)
    assert main(args) == C_EXIT_OK
    assert (read_bytes(icd), read_bytes(fr)) == first

    with open(icd) as f:
        assert set(json.load(f)) == {"mu_ap", "precision", "recall", "threshold"}
    assert set(pd.read_csv(fr)["role"]) == {"target", "non-target"}
    assert main(args + ["--lsh", "--task", "icd", "--threshold", "p95"]) in (C_EXIT_OK, C_EXIT_NUMERICAL)


def test_calibrate(trained):
    config, out = trained
    assert main(["calibrate", "--config", config, "--out", out, "--run", "dual"]) == C_EXIT_OK
    thresholds = read_json(os.path.join(out, "dual", "reports", "thresholds.json"))
    assert set(thresholds) == {"p90", "p95", "p99"}


def test_simulate_template_sweep(trained):
    config, out = trained
    args = ["simulate", "--config", config, "--out", out, "--run", "dual", "--templates", "8,4,1", "--lsh", "--forge"]
    assert main(args) == C_EXIT_OK
    reports = os.path.join(out, "dual", "reports")
    sweep = pd.read_csv(os.path.join(reports, "simulate_templates.csv"))
    assert sorted(sweep["k"].unique().tolist()) == [1, 4, 8]
    assert set(sweep["hash"]) == {"continuous", "lsh"}
    summary = read_json(os.path.join(reports, "simulate_summary.json"))
    assert len(summary["forge"]) == 1
    assert main(args[:-2] + ["--templates", "9"]) == C_EXIT_USAGE


def test_forge_and_activations(trained):
    config, out = trained
    assert main(["forge", "--config", config, "--out", out, "--run", "dual", "--seeds", "1,2"]) == C_EXIT_OK
    forge = pd.read_csv(os.path.join(out, "dual", "reports", "forge.csv"))
    assert forge["seed"].tolist() == [1, 2]
    assert main(["activations", "--config", config, "--out", out, "--run", "dual"]) == C_EXIT_OK
    assert os.path.exists(os.path.join(out, "dual", "reports", "activations_primary.csv"))


def test_clean(tmp_path):
    corpus = make_planted_corpus(seed=1)
    items, oracle = tmp_path / "items.csv", tmp_path / "oracle.json"
    pd.DataFrame({"item_id": corpus.item_ids, "individual": "alice"}).to_csv(items, index=False)
    oracle.write_text(json.dumps({"faces": corpus.faces, "copy": corpus.copies}))
    out = str(tmp_path / "runs")
    assert main(["clean", "--items", str(items), "--oracle", str(oracle), "--out", out, "--run", "c"]) == C_EXIT_OK
    with open(os.path.join(out, "c", "mislabeled.txt")) as f:
        assert set(f.read().split()) == corpus.mislabeled | corpus.faceless
    with open(os.path.join(out, "c", "duplicates.txt")) as f:
        assert set(f.read().split()) == corpus.duplicates

    oracle.write_text("{broken")
    assert main(["clean", "--items", str(items), "--oracle", str(oracle), "--out", out]) == C_EXIT_USAGE


def test_usage_errors(tmp_path, tiny_config_file):
    out = str(tmp_path / "runs")
    assert main(["eval", "--config", tiny_config_file, "--out", out, "--run", "missing"]) == C_EXIT_USAGE
    assert main(["train", "--config", str(tmp_path / "nope.toml"), "--out", out]) == C_EXIT_USAGE
    assert main(train_args(tiny_config_file, out, "m", "--mode", "multi")) == C_EXIT_USAGE
    assert main(["clean", "--out", out]) == C_EXIT_USAGE
    with pytest.raises(SystemExit) as info:
        main(["fly"])
    assert info.value.code == 2
