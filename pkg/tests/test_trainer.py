import collections

import pytest
import torch

import trainer
from conftest import TINY_MODEL, TINY_TRAINING, TINY_WORLD
from dataset import (PrimaryBatchSampler, SecondaryBatchSampler, WorldConfig, generate_world,
                     sample_primary_batch, sample_secondary_batch, subsample_target_train)
from model.model import ModelConfig, get_optimizer, init_params, sgd_step
from model.xbm import CrossBatchMemory, LossResult
from trainer import (EpochCheckpoint, GradientAccumulator, TrainingConfig, calibrate_thresholds, evaluate_test,
                     fr_individuals, fr_study, icd_pairs, loss_primary, loss_secondary, mix_grads, select_best,
                     selection_score, train, validate)
from utils.errors import ConfigError, NumericalError
from utils.hashing import LshProjector
from utils.utils import state_digest


def grads(value):
    return collections.OrderedDict([("w", torch.full((2,), float(value))), ("b", torch.tensor([float(value)]))])


def test_memory_size_defaults():
    assert TrainingConfig(mode="single").memory_size == 20000
    assert TrainingConfig(mode="dual").memory_size == 22500
    assert TrainingConfig(mode="single", M=500).memory_size == 500
    assert TrainingConfig(mode="single", w=0.5).secondary_weight == 0.0
    assert TrainingConfig(mode="dual", w=0.0).memory_size == 20000
    assert TrainingConfig(mode="multi").memory_size == 22500


def test_training_config_validation():
    with pytest.raises(ConfigError):
        TrainingConfig(mode="triple").validate()
    with pytest.raises(ConfigError):
        TrainingConfig(w=1.5).validate()
    with pytest.raises(ConfigError):
        TrainingConfig(m_p=1.0, m_n=1.0).validate()
    with pytest.raises(ConfigError):
        TrainingConfig(M=-1).validate()


def test_gradient_accumulator_averages():
    acc = GradientAccumulator(2)
    assert acc.add(grads(1.0)) is None
    step = acc.add(grads(3.0))
    torch.testing.assert_close(step["w"], torch.full((2,), 2.0))
    assert acc.flush() is None
    acc.add(grads(5.0))
    torch.testing.assert_close(acc.flush()["b"], torch.tensor([5.0]))
    with pytest.raises(ValueError):
        GradientAccumulator(0)


def test_span_two_over_identical_batches_equals_span_one(tiny_world):
    model = init_params(ModelConfig(**TINY_MODEL), seed=0)
    generator = torch.Generator().manual_seed(0)
    sampler = PrimaryBatchSampler(tiny_world.primary_train.shape[0], generator)
    sampler.start_epoch()
    batch = sample_primary_batch(tiny_world, sampler, 8, generator)
    _, g = loss_primary(model, batch, CrossBatchMemory(100, 4))

    twice = GradientAccumulator(2)
    assert twice.add(g) is None
    averaged = twice.add(g)
    once = GradientAccumulator(1).add(g)
    for name in g:
        torch.testing.assert_close(averaged[name], once[name])

    a, b = init_params(ModelConfig(**TINY_MODEL), seed=0), init_params(ModelConfig(**TINY_MODEL), seed=0)
    sgd_step(a, averaged, get_optimizer(a), 0.1)
    sgd_step(b, once, get_optimizer(b), 0.1)
    for (name, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), name


def test_mix_grads():
    mixed = mix_grads(grads(1.0), grads(3.0), 0.25)
    torch.testing.assert_close(mixed["w"], torch.full((2,), 1.5))
    torch.testing.assert_close(mix_grads(grads(2.0), None, 0.0)["b"], torch.tensor([2.0]))


def test_selection_score_and_best():
    assert selection_score(0.5) == 0.5
    assert selection_score(0.5, 0.8) == pytest.approx(0.58)
    ckpts = [EpochCheckpoint(epoch=i + 1, state={}, mu_ap_val=0.0, threshold=0.0, score=s)
             for i, s in enumerate([0.3, 0.7, 0.7, 0.2])]
    assert select_best(ckpts).epoch == 2
    with pytest.raises(ValueError):
        select_best([])


def test_fr_individuals(tiny_world):
    query_ids, references = fr_individuals(tiny_world, "val")
    assert list(references) == [0, *tiny_world.nontarget_val]
    assert len(references[0]) == 8
    # 4 target validation images plus 8 held-back images of each non-target
    assert len(query_ids) == 4 + 8 * 2
    assert set(tiny_world.identity_of(references[0]).tolist()) == {0}
    with pytest.raises(ValueError):
        fr_individuals(tiny_world, "train")


def test_icd_pairs(tiny_world, tiny_model):
    val = icd_pairs(tiny_model, tiny_world, "val")
    assert len(val) == 20 * 20 and val["is_true_match"].sum() == 10
    test = icd_pairs(tiny_model, tiny_world, "test", LshProjector(4, 32, seed=0))
    assert len(test) == 20 * 40
    assert test["distance"].max() <= 32


def test_validation_protocol(tiny_world, tiny_model):
    result = validate(tiny_model, tiny_world, 0.5, strict=False)
    assert 0.0 <= result.mu_ap <= 1.0
    assert set(result.f1) == {0, *tiny_world.nontarget_val}
    assert list(result.fr.columns) == ["identity", "role", "recall", "fp_per_million", "precision", "f1"]
    assert result.fr.loc[result.fr["identity"] == 0, "role"].item() == "target"

    fr = fr_study(tiny_model, tiny_world, 0.0)
    assert (fr["recall"] == 0).all()
    thresholds = calibrate_thresholds(tiny_model, tiny_world)
    assert set(thresholds) == {"p90", "p95", "p99"}
    icd, fr_test = evaluate_test(tiny_model, tiny_world, 1e9)
    assert icd["recall"] == 1.0
    assert set(fr_test["identity"]) == {0, *tiny_world.nontarget_test}


def tiny_training(**overrides):
    return TrainingConfig(**dict(TINY_TRAINING, **overrides))


def test_train_checkpoints_every_epoch(tiny_world):
    seen = []
    ckpts = train(tiny_training(), tiny_world, seed=1, model_config=ModelConfig(**TINY_MODEL),
                  on_checkpoint=seen.append)
    assert [c.epoch for c in ckpts] == [1, 2]
    assert all(a is b for a, b in zip(seen, ckpts))
    state = ckpts[-1].state
    assert state["epoch"] == 2 and state["n_updates"] == 4
    assert set(state["rng_state"]) == {"primary", "secondary"}
    assert ckpts[-1].f1_target is not None
    assert ckpts[-1].score == pytest.approx(ckpts[-1].mu_ap_val + 0.1 * ckpts[-1].f1_target)


def test_train_is_deterministic(tiny_world):
    a = train(tiny_training(epochs=1), tiny_world, seed=3, model_config=ModelConfig(**TINY_MODEL))
    b = train(tiny_training(epochs=1), tiny_world, seed=3, model_config=ModelConfig(**TINY_MODEL))
    assert state_digest(a[0].state) == state_digest(b[0].state)
    c = train(tiny_training(epochs=1), tiny_world, seed=4, model_config=ModelConfig(**TINY_MODEL))
    assert state_digest(a[0].state) != state_digest(c[0].state)


def test_dual_with_zero_weight_matches_single(tiny_world):
    dual = train(tiny_training(epochs=1, w=0.0), tiny_world, seed=5, model_config=ModelConfig(**TINY_MODEL))
    single = train(tiny_training(epochs=1, mode="single"), tiny_world, seed=5, model_config=ModelConfig(**TINY_MODEL))
    for name, value in single[0].state["model_state_dict"].items():
        assert torch.equal(dual[0].state["model_state_dict"][name], value), name
    assert single[0].f1_target is None
    assert single[0].score == single[0].mu_ap_val


def test_train_rejects_mismatched_model(tiny_world):
    with pytest.raises(ConfigError):
        train(tiny_training(), tiny_world, seed=1, model_config=ModelConfig(d_in=5, l=4))


def test_non_finite_loss_raises(tiny_world, monkeypatch):
    real = trainer.contrastive_loss_xbm

    def broken(embeddings, labels, mem, m_p, m_n):
        result = real(embeddings, labels, mem, m_p, m_n)
        return LossResult(torch.tensor(float("nan"), dtype=torch.float64), result.grads)

    monkeypatch.setattr(trainer, "contrastive_loss_xbm", broken)
    with pytest.raises(NumericalError) as info:
        train(tiny_training(), tiny_world, seed=1, model_config=ModelConfig(**TINY_MODEL))
    assert info.value.diagnostics["epoch"] == 1
    assert info.value.diagnostics["iteration"] == 1



def test_identical_target_views_cost_nothing():
    world = generate_world(WorldConfig(**dict(TINY_WORLD, nu_m=0.0, rho_m=0.0)))
    world = subsample_target_train(world, 1)
    sampler = SecondaryBatchSampler(world, 1.0, torch.Generator().manual_seed(0))
    sampler.start_epoch()
    batch = sample_secondary_batch(world, sampler, 1)
    assert torch.equal(batch.views[0], batch.views[1])

    model = init_params(ModelConfig(**TINY_MODEL), seed=0)
    loss, g = loss_secondary(model, batch, CrossBatchMemory(100, 4))
    assert float(loss) == 0.0
    assert all(torch.count_nonzero(v) == 0 for v in g.values())


def test_zero_weight_matches_single_with_default_memory(tiny_world):
    dual = train(tiny_training(epochs=1, w=0.0, M=0), tiny_world, seed=6, model_config=ModelConfig(**TINY_MODEL))
    single = train(tiny_training(epochs=1, mode="single", M=0), tiny_world, seed=6,
                   model_config=ModelConfig(**TINY_MODEL))
    for name, value in single[0].state["model_state_dict"].items():
        assert torch.equal(dual[0].state["model_state_dict"][name], value), name
