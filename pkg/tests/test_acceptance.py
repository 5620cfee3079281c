"""
Desk-scale study on the default synthetic world with configs/desk.toml.
Deselected by default; run with `pytest -m slow`.
"""
import dataclasses
import os
import time

import pytest

from dataset import generate_world
from results.eval import threshold_for_spec
from run import forge_trial, template_sweep
from trainer import evaluate_test, icd_pairs, select_best, train
from utils.config import load_config
from utils.hashing import LshProjector
from utils.utils import load_checkpoint, save_checkpoint

pytestmark = pytest.mark.slow

DESK = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs", "desk.toml")


def train_best(config, tmp_dir, seed=1):
    world = generate_world(config.world)
    best = select_best(train(config.training, world, seed, model_config=config.model))
    path, digest = save_checkpoint(str(tmp_dir), best.state)
    model, _ = load_checkpoint(os.path.join(str(tmp_dir), path), expected_digest=digest)
    return world, model


def study(model, world, spec="p90", projector=None):
    threshold = threshold_for_spec(icd_pairs(model, world, "val", projector), spec)
    icd, fr = evaluate_test(model, world, threshold, projector)
    targets = fr[fr["role"] == "target"]
    others = fr[fr["role"] == "non-target"]
    return threshold, icd, targets, others


@pytest.fixture(scope="module")
def desk():
    return load_config(DESK, environ={})


@pytest.fixture(scope="module")
def dual(desk, tmp_path_factory):
    start = time.time()
    world, model = train_best(desk, tmp_path_factory.mktemp("dual"))
    return world, model, time.time() - start


@pytest.fixture(scope="module")
def single(desk, tmp_path_factory):
    config = dataclasses.replace(desk, training=dataclasses.replace(desk.training, mode="single"))
    return train_best(config, tmp_path_factory.mktemp("single"))


def test_dual_purpose_separation(dual, single):
    world, model, elapsed = dual
    assert elapsed < 300
    _, icd, targets, others = study(model, world)
    assert targets["recall"].min() >= 0.60
    assert others["f1"].median() <= 0.05

    s_world, s_model = single
    _, s_icd, _, _ = study(s_model, s_world)
    assert abs(icd["mu_ap"] - s_icd["mu_ap"]) <= 0.03


def test_single_template_barely_hurts(dual, desk):
    world, model, _ = dual
    threshold, _, _, _ = study(model, world)
    sweep = template_sweep(model, world, [desk.world.N_T_train, 1], threshold, desk.css)
    f1 = dict(zip(sweep["k"], sweep["f1"]))
    assert abs(f1[1] - f1[desk.world.N_T_train]) <= 0.05


def test_lsh_keeps_both_purposes(dual, desk):
    world, model, _ = dual
    _, icd, targets, _ = study(model, world)
    projector = LshProjector(desk.model.l, desk.hashing.l_b, seed=desk.hashing.lsh_seed)
    _, lsh_icd, lsh_targets, _ = study(model, world, projector=projector)
    assert lsh_icd["mu_ap"] >= 0.8 * icd["mu_ap"]
    assert abs(lsh_targets["recall"].mean() - targets["recall"].mean()) <= 0.05


@pytest.mark.parametrize("spec", ["p95", "p99"])
def test_stricter_thresholds(dual, spec):
    world, model, _ = dual
    _, _, base, _ = study(model, world, "p90")
    _, _, targets, others = study(model, world, spec)
    assert base["recall"].mean() - targets["recall"].mean() <= 0.05
    assert others["f1"].median() <= 0.05


def test_forged_collisions(dual, desk):
    world, model, _ = dual
    threshold, _, _, _ = study(model, world)
    trials = [forge_trial(model, world, desk, threshold, seed)[0] for seed in range(1, 11)]
    assert sum(t["flagged"] and t["ratio"] <= 0.1 for t in trials) >= 9


def test_multi_target(desk, tmp_path_factory):
    config = dataclasses.replace(desk, world=dataclasses.replace(desk.world, n_targets=5),
                                 training=dataclasses.replace(desk.training, mode="multi", p_T=0.15))
    world, model = train_best(config.validate(), tmp_path_factory.mktemp("multi"))
    _, _, targets, others = study(model, world)
    assert len(targets) == 5
    assert targets["recall"].min() >= 0.45
    assert others["f1"].median() <= 0.05
