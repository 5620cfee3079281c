import numpy as np
import pytest
import torch

from model.model import (ModelConfig, backward, embed, forward, get_optimizer, init_params, lr_at_epoch,
                         sgd_step)
from model.xbm import CrossBatchMemory, contrastive_loss_xbm, xbm_update
from utils.errors import ShapeError, StaleCacheError


def gaussian(*shape, seed=0):
    return torch.randn(*shape, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))


def test_init_is_seeded(tiny_model):
    other = init_params(tiny_model.config, seed=0)
    for (name, a), (_, b) in zip(tiny_model.state_dict().items(), other.state_dict().items()):
        assert torch.equal(a, b), name
    assert all(torch.count_nonzero(p) == 0 for n, p in other.named_parameters() if n.endswith("bias"))


def test_embeddings_are_unit_norm(tiny_model):
    x = gaussian(5, 8)
    emb, _ = forward(tiny_model, x, mode="eval")
    torch.testing.assert_close(torch.linalg.vector_norm(emb, dim=1), torch.ones(5, dtype=torch.float64))
    torch.testing.assert_close(embed(tiny_model, x), emb)
    single, _ = forward(tiny_model, x[0])
    assert single.shape == (4,)


def test_forward_shape_errors(tiny_model):
    with pytest.raises(ShapeError):
        forward(tiny_model, gaussian(3, 5))
    with pytest.raises(ShapeError):
        forward(tiny_model, gaussian(1, 8), mode="train")
    with pytest.raises(ValueError):
        forward(tiny_model, gaussian(2, 8), mode="test")


def test_no_hidden_layers_is_affine_then_normalized():
    model = init_params(ModelConfig(d_in=3, l=2, hidden_sizes=[]), seed=1)
    x = gaussian(1, 3, seed=1)
    emb, _ = forward(model, x, mode="train")
    raw = x @ model.fcfinal.weight.T + model.fcfinal.bias
    torch.testing.assert_close(emb, raw / torch.linalg.vector_norm(raw))


def test_train_mode_updates_running_stats(tiny_model):
    before = tiny_model.features.bn1.running_mean.clone()
    forward(tiny_model, gaussian(4, 8, seed=2), mode="eval")
    assert torch.equal(tiny_model.features.bn1.running_mean, before)
    forward(tiny_model, gaussian(4, 8, seed=3), mode="train")
    assert not torch.equal(tiny_model.features.bn1.running_mean, before)


def test_stale_cache(tiny_model):
    x = gaussian(4, 8, seed=4)
    emb, cache = forward(tiny_model, x, mode="train")
    grads, _ = backward(cache, torch.ones_like(emb))
    with pytest.raises(StaleCacheError):
        backward(cache, torch.ones_like(emb))

    emb, cache = forward(tiny_model, x, mode="train")
    sgd_step(tiny_model, grads, get_optimizer(tiny_model), 0.1)
    with pytest.raises(StaleCacheError):
        backward(cache, torch.ones_like(emb))


def test_backward_shape_error(tiny_model):
    emb, cache = forward(tiny_model, gaussian(3, 8, seed=5), mode="train")
    with pytest.raises(ShapeError):
        backward(cache, torch.ones(3, 5))


def test_lr_schedule():
    assert lr_at_epoch(0.1, 0.9, 0.05, 1) == pytest.approx(0.1)
    assert lr_at_epoch(0.1, 0.9, 0.05, 2) == pytest.approx(0.09)
    assert lr_at_epoch(0.1, 0.9, 0.05, 8) == pytest.approx(0.05)
    with pytest.raises(ValueError):
        lr_at_epoch(0.1, 0.9, 0.05, 0)


def test_sgd_step_matches_update_rule():
    model = init_params(ModelConfig(d_in=3, l=2, hidden_sizes=[]), seed=2)
    optimizer = get_optimizer(model, eta=0.1, weight_decay=0.01, momentum=0.9)
    theta0 = {n: p.detach().clone() for n, p in model.named_parameters()}
    g1 = {n: torch.full_like(p, 0.5) for n, p in model.named_parameters()}
    g2 = {n: torch.full_like(p, -0.25) for n, p in model.named_parameters()}

    sgd_step(model, g1, optimizer, 0.1)
    v1 = {n: g1[n] + 0.01 * theta0[n] for n in theta0}
    theta1 = {n: theta0[n] - 0.1 * v1[n] for n in theta0}
    sgd_step(model, g2, optimizer, 0.05)
    v2 = {n: 0.9 * v1[n] + g2[n] + 0.01 * theta1[n] for n in theta0}
    for n, p in model.named_parameters():
        torch.testing.assert_close(p.detach(), theta1[n] - 0.05 * v2[n])
    assert model.n_updates == 2


def test_sgd_step_rejects_bad_grads(tiny_model):
    optimizer = get_optimizer(tiny_model)
    grads = {n: torch.zeros_like(p) for n, p in tiny_model.named_parameters()}
    grads.pop("fcfinal.bias")
    with pytest.raises(ShapeError):
        sgd_step(tiny_model, grads, optimizer, 0.1)
    grads["fcfinal.bias"] = torch.zeros(99)
    with pytest.raises(ShapeError):
        sgd_step(tiny_model, grads, optimizer, 0.1)


def _xbm_loss(model, x, labels, mem):
    emb, _ = forward(model, x, mode="train")
    return float(contrastive_loss_xbm(emb, labels, mem).loss)


def test_end_to_end_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    h = 1e-6
    worst, checked = 0.0, 0
    for trial in range(200):
        d_in, l = int(rng.integers(2, 17)), int(rng.integers(2, 9))
        hidden = [int(rng.integers(2, 9))] if rng.random() < 0.7 else []
        model = init_params(ModelConfig(d_in=d_in, l=l, hidden_sizes=hidden), seed=trial)
        b = int(rng.integers(2, 7))
        x = torch.as_tensor(rng.normal(size=(b, d_in)))
        labels = torch.as_tensor(rng.integers(0, 3, size=b))
        model.train()
        with torch.no_grad():
            # a row with every unit dead sits on a constant, non-differentiable branch
            if (model.penultimate(x) == 0).all(dim=1).any():
                continue
        checked += 1

        mem = CrossBatchMemory(64, l)
        xbm_update(mem, torch.nn.functional.normalize(torch.as_tensor(rng.normal(size=(10, l))), dim=1),
                   torch.as_tensor(rng.integers(0, 3, size=10)))
        emb, cache = forward(model, x, mode="train")
        xbm_update(mem, emb, labels)
        result = contrastive_loss_xbm(emb, labels, mem)
        analytic, _ = backward(cache, result.grads)

        # a sample of coordinates per parameter keeps the sweep fast
        params = dict(model.named_parameters())
        a, n = [], []
        for name, p in params.items():
            flat = p.data.view(-1)
            for k in rng.choice(flat.numel(), size=min(3, flat.numel()), replace=False):
                old = float(flat[k])
                flat[k] = old + h
                up = _xbm_loss(model, x, labels, mem)
                flat[k] = old - h
                down = _xbm_loss(model, x, labels, mem)
                flat[k] = old
                a.append(float(analytic[name].view(-1)[k]))
                n.append((up - down) / (2 * h))
        a, n = np.array(a), np.array(n)
        err = np.abs(a - n).max() / max(np.abs(a).max(), np.abs(n).max(), 1e-3)
        worst = max(worst, err)
    assert checked >= 150
    assert worst < 1e-5


def test_input_gradient_matches_finite_differences(tiny_model):
    x = gaussian(8, seed=6)
    target = torch.nn.functional.normalize(gaussian(4, seed=7), dim=0)

    def loss(v):
        emb, _ = forward(tiny_model, v, mode="eval")
        return float(((emb - target) ** 2).sum())

    emb, cache = forward(tiny_model, x, mode="eval")
    _, grad_x = backward(cache, 2 * (emb - target))
    h = 1e-6
    numeric = torch.zeros_like(x)
    for i in range(8):
        e = torch.zeros_like(x)
        e[i] = h
        numeric[i] = (loss(x + e) - loss(x - e)) / (2 * h)
    torch.testing.assert_close(grad_x, numeric, atol=1e-7, rtol=1e-5)


def test_dead_rows_embed_as_first_basis_vector(tiny_model):
    with torch.no_grad():
        tiny_model.features.fc1.weight.copy_(-tiny_model.features.fc1.weight.abs())
    x = gaussian(3, 8, seed=8).abs()
    emb, cache = forward(tiny_model, x, mode="eval")
    torch.testing.assert_close(emb, torch.eye(4, dtype=torch.float64)[[0, 0, 0]])
    grads, grad_x = backward(cache, torch.ones_like(emb))
    assert all(torch.count_nonzero(g) == 0 for g in grads.values())
    assert torch.count_nonzero(grad_x) == 0


def test_fresh_model_embeds_the_world(tiny_world):
    model = init_params(ModelConfig(d_in=8, l=4, hidden_sizes=[6]), seed=0)
    for queries in (tiny_world.queries_val, tiny_world.queries_test, tiny_world.references):
        norms = torch.linalg.vector_norm(embed(model, queries), dim=1)
        torch.testing.assert_close(norms, torch.ones_like(norms))


def test_final_layer_is_xavier_normal():
    config = ModelConfig(d_in=8, l=4, hidden_sizes=[16])
    weights = torch.cat([init_params(config, seed=s).fcfinal.weight.detach().view(-1) for s in range(1000)])
    expected = 2.0 / (16 + 4)
    assert abs(float(weights.var()) - expected) <= 0.2 * expected
