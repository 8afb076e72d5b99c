import struct
import zlib

import numpy as np
import pytest
import torch

from dltta.errors import DimensionError, DomainError, FormatError, StateError, VersionError
from dltta.model import (BatchNorm, Dense, Model, NormPolicy, ReLU, backward, build_model,
                         commit_running_stats, forward, load_model, model_from_bytes, model_to_bytes,
                         predict, save_model, sgd_step, train_source)
from dltta.objective import entropy_loss, entropy_loss_grad
from dltta.stream import LabeledSet

POLICIES = [NormPolicy("test_batch"), NormPolicy("train_running"), NormPolicy("test_ema", 0.3)]


def randomize(model, rng):
    """Perturb every parameter and running statistic so nothing sits at its init value."""
    for name, p in model.named_parameters():
        model.set_parameter(name, p + rng.normal(scale=0.3, size=p.shape))
    for bn in model.batchnorms():
        bn.running_mean = rng.normal(size=bn.n_in)
        bn.running_var = rng.uniform(0.5, 2.0, size=bn.n_in)
    return model


def torch_forward(model, x, policy):
    """Straight-line torch version of the classifier, parameters as leaf tensors."""
    params = {n: torch.tensor(p, dtype=torch.float64, requires_grad=True) for n, p in model.named_parameters()}
    h = torch.tensor(x, dtype=torch.float64)
    features = None
    for prefix, layer in model.layers():
        if prefix.startswith("g") and features is None:
            features = h
        if isinstance(layer, Dense):
            h = h @ params[f"{prefix}.weight"].T + params[f"{prefix}.bias"]
        elif isinstance(layer, BatchNorm):
            bm, bv = h.mean(0), h.var(0, unbiased=False)
            rm, rv = torch.tensor(layer.running_mean), torch.tensor(layer.running_var)
            if policy.mode == "test_batch":
                mean, var = bm, bv
            elif policy.mode == "train_running":
                mean, var = rm, rv
            else:
                c = policy.ema_momentum
                mean, var = (1 - c) * rm + c * bm, (1 - c) * rv + c * bv
            h = params[f"{prefix}.gamma"] * (h - mean) / torch.sqrt(var + layer.eps) + params[f"{prefix}.beta"]
        else:
            h = torch.relu(h)
    return params, features, h


def numpy_forward_oracle(model, x, policy):
    """Independent loop-based forward pass (no layer objects' forward methods)."""
    h = np.array(x, dtype=float)
    for _, layer in model.layers():
        if isinstance(layer, Dense):
            h = np.array([[sum(layer.weight[o, i] * row[i] for i in range(row.size)) + layer.bias[o]
                           for o in range(layer.weight.shape[0])] for row in h])
        elif isinstance(layer, BatchNorm):
            bm = h.sum(0) / h.shape[0]
            bv = ((h - bm) ** 2).sum(0) / h.shape[0]
            mean, var = {"test_batch": (bm, bv), "train_running": (layer.running_mean, layer.running_var)}.get(
                policy.mode, ((1 - policy.ema_momentum) * layer.running_mean + policy.ema_momentum * bm,
                              (1 - policy.ema_momentum) * layer.running_var + policy.ema_momentum * bv))
            h = layer.gamma * (h - mean) / np.sqrt(var + layer.eps) + layer.beta
        else:
            h = np.where(h > 0, h, 0.0)
    e = np.exp(h - h.max(1, keepdims=True))
    return e / e.sum(1, keepdims=True)


def test_zero_head_gives_uniform(rng):
    model = build_model(seed=3)
    model.set_parameter("g.0.weight", np.zeros((4, 32)))
    model.set_parameter("g.0.bias", np.zeros(4))
    out = forward(model, rng.normal(size=(5, 8)))
    assert np.allclose(out.probs, 0.25)


def test_duplicated_rows_identical_probs(rng):
    model = randomize(build_model(seed=1), rng)
    x = np.repeat(rng.normal(size=(1, 8)), 4, axis=0)
    probs = forward(model, x, NormPolicy("test_batch")).probs
    assert np.all(probs == probs[0])


@pytest.mark.parametrize("policy", POLICIES, ids=lambda p: p.mode)
def test_forward_matches_oracle(policy, rng):
    model = randomize(build_model(seed=2, hidden=(6, 5)), rng)
    x = rng.normal(size=(7, 8))
    assert np.allclose(forward(model, x, policy).probs, numpy_forward_oracle(model, x, policy), atol=1e-10)


def test_forward_features_are_extractor_output(rng):
    model = randomize(build_model(seed=2), rng)
    x = rng.normal(size=(5, 8))
    _, feats, _ = torch_forward(model, x, NormPolicy("test_batch"))
    out = forward(model, x)
    assert out.features.shape == (5, model.n_features)
    assert np.allclose(out.features, feats.detach().numpy(), atol=1e-12)


def test_forward_extent_errors(rng):
    model = build_model()
    with pytest.raises(DimensionError):
        forward(model, rng.normal(size=(4, 3)))
    with pytest.raises(DimensionError):
        forward(model, rng.normal(size=8))


def test_forward_does_not_touch_running_stats(rng):
    model = randomize(build_model(), rng)
    before = [bn.running_mean.copy() for bn in model.batchnorms()]
    forward(model, rng.normal(size=(6, 8)), NormPolicy("test_ema", 0.5))
    assert all(np.array_equal(a, bn.running_mean) for a, bn in zip(before, model.batchnorms()))


def test_single_sample_falls_back_to_ema(rng):
    model = randomize(build_model(), rng)
    out = forward(model, rng.normal(size=(1, 8)), NormPolicy("test_batch"))
    assert out.policy == NormPolicy("test_ema", 0.1)


@pytest.mark.parametrize("policy", POLICIES, ids=lambda p: p.mode)
@pytest.mark.parametrize("adapt", ["bn_affine", "extractor"])
def test_backward_matches_torch(policy, adapt, rng):
    model = randomize(build_model(seed=4, hidden=(7, 6), adapt=adapt), rng)
    x = rng.normal(size=(9, 8))
    fwd = forward(model, x, policy)
    grads = backward(model, fwd, entropy_loss_grad(fwd.logits))
    params, _, logits = torch_forward(model, x, policy)
    logp = torch.log_softmax(logits, 1)
    (-(logp.exp() * logp).sum(1).mean()).backward()
    assert sorted(grads) == sorted(model.adaptable())
    for name, g in grads.items():
        assert np.allclose(g, params[name].grad.numpy(), rtol=1e-9, atol=1e-12), name


def test_backward_matches_finite_differences(rng):
    model = randomize(build_model(seed=5, hidden=(5, 4)), rng)
    x = rng.normal(size=(6, 8))
    policy = NormPolicy("test_batch")
    fwd = forward(model, x, policy)
    grads = backward(model, fwd, entropy_loss_grad(fwd.logits))
    h = 1e-4
    for name in model.adaptable():
        base = model.parameters()[name].copy()
        for i in range(base.size):
            step = np.zeros_like(base)
            step.flat[i] = h
            model.set_parameter(name, base + step)
            up = entropy_loss(forward(model, x, policy).probs)
            model.set_parameter(name, base - step)
            down = entropy_loss(forward(model, x, policy).probs)
            model.set_parameter(name, base)
            assert grads[name].flat[i] == pytest.approx((up - down) / (2 * h), rel=1e-4, abs=1e-9)


def test_backward_zero_upstream(rng):
    model = randomize(build_model(), rng)
    fwd = forward(model, rng.normal(size=(4, 8)))
    grads = backward(model, fwd, np.zeros_like(fwd.logits))
    assert all(np.all(g == 0) for g in grads.values())


def test_backward_omits_frozen(rng):
    model = build_model()
    fwd = forward(model, rng.normal(size=(4, 8)))
    grads = backward(model, fwd, entropy_loss_grad(fwd.logits))
    assert "g.0.weight" not in grads and "h.0.weight" not in grads
    assert set(grads) == {"h.1.gamma", "h.1.beta", "h.4.gamma", "h.4.beta"}


def test_backward_stale_forward(rng):
    model = build_model()
    fwd = forward(model, rng.normal(size=(4, 8)))
    grads = backward(model, fwd, entropy_loss_grad(fwd.logits))
    sgd_step(model, grads, 0.1)
    with pytest.raises(StateError):
        backward(model, fwd, entropy_loss_grad(fwd.logits))
    with pytest.raises(StateError):
        backward(model.copy(), forward(model, np.ones((2, 8))), np.zeros((2, 4)))


def test_sgd_step_arithmetic():
    model = build_model()
    model.set_parameter("h.1.gamma", np.ones(32))
    sgd_step(model, {"h.1.gamma": np.full(32, 0.5)}, 0.01)
    assert np.allclose(model.parameters()["h.1.gamma"], 0.995, atol=1e-15)


def test_sgd_step_tiny_and_zero(rng):
    model = build_model()
    g = {n: rng.normal(size=p.shape) for n, p in model.parameters().items() if model.adapt_mask[n]}
    before = {n: p.copy() for n, p in model.parameters().items()}
    with pytest.raises(DomainError):
        sgd_step(model, g, 0.0)
    with pytest.raises(DomainError):
        sgd_step(model, g, float("nan"))
    sgd_step(model, g, 1e-12)
    for n in g:
        assert np.all(np.abs(model.parameters()[n] - before[n]) <= 1e-12 * np.abs(g[n]) + np.spacing(before[n]))
    zeros = {n: np.zeros_like(v) for n, v in g.items()}
    snap = {n: p.copy() for n, p in model.parameters().items()}
    sgd_step(model, zeros, 0.5)
    assert all(np.array_equal(snap[n], p) for n, p in model.parameters().items())


def test_sgd_step_rejects_frozen_gradient():
    model = build_model()
    with pytest.raises(DomainError):
        sgd_step(model, {"g.0.bias": np.zeros(4)}, 0.1)


def test_commit_running_stats(rng):
    model = build_model()
    fwd = forward(model, rng.normal(size=(5, 8)))
    bn = model.batchnorms()[0]
    mean, var = fwd.batch_stats[0]
    commit_running_stats(model, fwd, 0.25)
    assert np.allclose(bn.running_mean, 0.25 * mean)
    assert np.allclose(bn.running_var, 0.75 + 0.25 * var)


def _blobs(rng, n=400):
    y = rng.integers(0, 2, size=n)
    x = rng.normal(size=(n, 8)) + np.where(y[:, None] == 1, 3.0, -3.0)
    return LabeledSet(x, y)


def test_train_separable_blobs(rng):
    data = _blobs(rng)
    model = build_model(hidden=(16, 16), n_classes=2, seed=0)
    trained = train_source(model, data, 50, 0.01, seed=0)
    assert np.mean(predict(trained, data.features) == data.labels) >= 0.99


def test_train_zero_epochs_and_determinism(rng):
    data = _blobs(rng, 100)
    model = build_model(n_classes=2, seed=0)
    same = train_source(model, data, 0, 0.1, seed=0)
    assert model_to_bytes(same) == model_to_bytes(model)
    a = train_source(model, data, 2, 0.1, seed=5, optimizer="momentum")
    b = train_source(model, data, 2, 0.1, seed=5, optimizer="momentum")
    assert model_to_bytes(a) == model_to_bytes(b)


def test_train_errors(rng):
    model = build_model(n_classes=2)
    with pytest.raises(DomainError):
        train_source(model, LabeledSet(np.zeros((0, 8)), np.zeros(0, dtype=int)), 1, 0.1, 0)
    with pytest.raises(DomainError):
        train_source(model, _blobs(rng, 10), 1, 0.1, 0, optimizer="lbfgs")


def test_round_trip(tmp_path, rng):
    model = randomize(build_model(seed=9, adapt="extractor"), rng)
    path = tmp_path / "m.bin"
    save_model(model, path)
    loaded = load_model(path)
    assert model_to_bytes(loaded) == model_to_bytes(model)
    assert loaded.adapt_mask == model.adapt_mask
    for (_, a), (_, b) in zip(model.named_parameters(), loaded.named_parameters()):
        assert np.array_equal(a, b)


def test_corrupt_header():
    data = bytearray(model_to_bytes(build_model()))
    data[0] ^= 0xFF
    with pytest.raises(FormatError):
        model_from_bytes(bytes(data))
    data = bytearray(model_to_bytes(build_model()))
    data[40] ^= 0x01
    with pytest.raises(FormatError):
        model_from_bytes(bytes(data))


def test_truncated():
    data = model_to_bytes(build_model())
    with pytest.raises(FormatError):
        model_from_bytes(data[:-10])


def test_future_version():
    data = bytearray(model_to_bytes(build_model()))
    data[8:12] = struct.pack("<I", 99)
    body = bytes(data[:-4])
    with pytest.raises(VersionError):
        model_from_bytes(body + struct.pack("<I", zlib.crc32(body)))


def test_model_extent_check():
    with pytest.raises(DimensionError):
        Model([Dense(np.ones((3, 2)), np.zeros(3)), BatchNorm.init(4), ReLU()], [Dense(np.ones((2, 4)), np.zeros(2))])
