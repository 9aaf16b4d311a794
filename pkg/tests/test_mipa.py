import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from frappe_lite import env
from frappe_lite.autograd import NumericError, ShapeError, Tensor, no_grad, ops
from frappe_lite.mipa import (ConfigError, ExpertSet, Router, aggregate, lora_forward, lora_targets,
                              load_balance_loss, merge_lora, route, smooth_weights)
from frappe_lite.policy import PolicyModel

finite = st.floats(-5, 5, allow_nan=False, width=64)


@pytest.fixture(scope="module")
def model():
    return PolicyModel(seed=0)


def _cond(B=2, seed=0):
    rng = np.random.default_rng(seed)
    states = [env.sample_layout(rng, env.EASY) for _ in range(B)]
    return (np.stack([env.render(s) for s in states]), np.stack([s.proprio() for s in states]),
            np.array([s.instruction for s in states]), rng.standard_normal((B, 8, 3)).astype(np.float32))


# ------------------------------------------------------------------- LoRA

def _lora(seed=0, d_in=6, d_out=5, r=2):
    rng = np.random.default_rng(seed)
    return (Tensor(rng.standard_normal((d_in, d_out))), Tensor(rng.standard_normal((r, d_in))),
            Tensor(rng.standard_normal((d_out, r))), Tensor(rng.standard_normal((4, d_in))))


def test_lora_zero_up_is_identity():
    W, A, U, x = _lora()
    U = Tensor(np.zeros(U.shape))
    assert lora_forward(W, A, U, x).data.tobytes() == (x @ W).data.tobytes()


def test_lora_alpha_zero_is_identity():
    W, A, U, x = _lora(1)
    np.testing.assert_array_equal(lora_forward(W, A, U, x, alpha=0.0).data, (x @ W).data)


def test_lora_merge_matches_adapter_path():
    W, A, U, x = _lora(2)
    merged = merge_lora(W.data, A.data, U.data, alpha=8.0)
    np.testing.assert_allclose((x.data @ merged), lora_forward(W, A, U, x, alpha=8.0).data, atol=1e-5)


def test_lora_rank_must_be_below_min_dim():
    rng = np.random.default_rng(3)
    W = Tensor(rng.standard_normal((4, 3)))
    with pytest.raises(ConfigError):
        lora_forward(W, Tensor(np.ones((3, 4))), Tensor(np.zeros((3, 3))), Tensor(np.ones((1, 4))))


# ---------------------------------------------------------------- routing

def test_zero_final_router_layer_is_uniform():
    r = Router(np.random.default_rng(0), 128, 32, 3)
    w, g = route(r, Tensor(np.random.default_rng(1).standard_normal((5, 128))))
    assert np.all(g.data == 0)
    np.testing.assert_allclose(w.data, 1 / 3, atol=1e-7)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 128), elements=finite), st.floats(0.01, 100))
def test_route_on_simplex_under_rescaling(x, scale):
    r = Router(np.random.default_rng(2), 128, 32, 3)
    r.fc2.weight.data = np.random.default_rng(3).standard_normal(r.fc2.weight.shape).astype(np.float32)
    for inp in (x, x * scale):
        w, _ = route(r, Tensor(inp))
        np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-6)


def test_smoothing_values():
    np.testing.assert_allclose(smooth_weights(np.array([1.0, 0.0, 0.0]), 0.1), [14 / 15, 1 / 30, 1 / 30], atol=1e-7)
    u = np.full(3, 1 / 3)
    np.testing.assert_allclose(smooth_weights(u, 0.37), u, atol=1e-12)
    w = np.array([0.2, 0.5, 0.3])
    np.testing.assert_array_equal(smooth_weights(w, 0.0), w)
    for bad in (-0.1, 1.0, 1.5):
        with pytest.raises(ConfigError):
            smooth_weights(w, bad)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (4, 3), elements=finite), st.floats(0.0, 0.99))
def test_smoothed_weights_floor_and_simplex(logits, eps):
    w = ops.softmax(Tensor(logits)).data.astype(np.float64)
    ws = smooth_weights(w, eps)
    np.testing.assert_allclose(ws.sum(-1), 1.0, atol=1e-6)
    assert np.all(ws >= eps / 3 - 1e-7)
    top = np.sort(w, -1)
    unique = top[:, -1] - top[:, -2] > 1e-6
    assert np.all(np.argmax(ws, -1)[unique] == np.argmax(w, -1)[unique])


# ---------------------------------------------------------------- balance

def test_load_balance_closed_forms():
    assert abs(float(load_balance_loss(Tensor([0.0, 0.0, 0.0])).data) - math.log(3) ** 2) < 1e-5
    l3 = -math.log(3)
    assert abs(float(load_balance_loss(Tensor([l3, l3, l3])).data)) < 1e-7
    ref = (3 + math.log(1 + math.exp(-1) + math.exp(-2))) ** 2
    assert abs(float(load_balance_loss(Tensor([1.0, 2.0, 3.0])).data) - ref) < 1e-4
    assert abs(ref - 11.6118) < 1e-4


def test_load_balance_mean_over_rows():
    g = np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]])
    ref = np.mean(np.log(np.exp(g).sum(-1)) ** 2)
    assert abs(float(load_balance_loss(Tensor(g)).data) - ref) < 1e-5


def test_load_balance_rejects_non_finite():
    with pytest.raises(NumericError):
        load_balance_loss(Tensor([0.0, np.inf, 1.0]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 3), elements=finite))
def test_load_balance_nonnegative(g):
    assert float(load_balance_loss(Tensor(g)).data) >= 0


# ------------------------------------------------------------- aggregation

class _Head:
    def __init__(self, seed=0):
        rng = np.random.default_rng(seed)
        self.w1, self.w2 = Tensor(rng.standard_normal((6, 6))), Tensor(rng.standard_normal((6, 3)))

    def __call__(self, z):
        return ops.gelu(z @ self.w1) @ self.w2


def test_aggregate_one_hot_collapses_exactly():
    rng = np.random.default_rng(0)
    zs = [Tensor(rng.standard_normal((8, 6))) for _ in range(3)]
    head = _Head()
    for j in range(3):
        w = Tensor(np.eye(3)[j])
        assert aggregate(zs, w, head).data.tobytes() == head(zs[j]).data.tobytes()


def test_aggregate_identical_latents_ignore_weights():
    z = Tensor(np.random.default_rng(1).standard_normal((8, 6)))
    head = _Head(1)
    out = aggregate([z, z, z], Tensor([0.2, 0.5, 0.3]), head)
    np.testing.assert_allclose(out.data, head(z).data, atol=1e-5)


def test_aggregate_matches_recomputation_and_is_permutation_equivariant():
    rng = np.random.default_rng(2)
    zs = [rng.standard_normal((2, 8, 6)) for _ in range(3)]
    w = rng.dirichlet(np.ones(3), size=2)
    head = _Head(2)
    out = aggregate([Tensor(z) for z in zs], Tensor(w), head).data
    mixed = sum(w[:, i, None, None] * zs[i] for i in range(3))
    np.testing.assert_allclose(out, head(Tensor(mixed)).data, atol=1e-5)
    perm = [2, 0, 1]
    out_p = aggregate([Tensor(zs[i]) for i in perm], Tensor(w[:, perm]), head).data
    np.testing.assert_allclose(out, out_p, atol=1e-5)


def test_aggregate_length_mismatch():
    z = [Tensor(np.ones((8, 6)))] * 2
    with pytest.raises(ShapeError):
        aggregate(z, Tensor([0.3, 0.3, 0.4]), _Head())


# ------------------------------------------------------------- expert set

def test_expert_names_and_lora_coverage(model):
    ex = ExpertSet(model, seed=0)
    names = [n for n, _ in ex.named_parameters()]
    assert "expert.0.prefix" in names and "expert.2.proj" in names
    assert "router.0.weight" in names and "router.1.bias" in names
    keys = lora_targets(model)
    assert len(keys) == 8 * 10
    assert f"expert.1.lora.{next(iter(keys))}.A" in names
    assert len(names) == len(set(names))


def test_expert_rank_validation(model):
    with pytest.raises(ConfigError):
        ExpertSet(model, rank=64)
    with pytest.raises(ConfigError):
        ExpertSet(model, smoothing=1.0)


def test_zero_init_lora_matches_base_forward(model):
    args = _cond(2, seed=4)
    ex = ExpertSet(model, seed=1, prefix_init=model.prefix.data)
    with no_grad():
        base = model.forward(*args, np.array([3, 30]), with_prefix=False).latents.data
        res = ex.run(model, *args, np.array([3, 30]))
    for i in range(3):
        assert res.latents.data[i].tobytes() == base[0].tobytes()


def test_one_hot_router_equals_single_expert_decode(model):
    args = _cond(2, seed=5)
    ex = ExpertSet(model, seed=2, smoothing=0.0)
    rng = np.random.default_rng(6)
    for e in ex.experts:
        for _, U in e.lora.values():
            U.data = rng.normal(0, 0.05, U.shape).astype(np.float32)
    ex.router.fc2.bias.data = np.array([0.0, 200.0, 0.0], np.float32)  # saturated softmax: exact one-hot
    with no_grad():
        res = ex.run(model, *args, np.array([8, 8]))
        single = model.decode(res.latents[1]).data
    np.testing.assert_array_equal(res.weights.data, np.tile([0.0, 1.0, 0.0], (2, 1)))
    assert res.actions.data.tobytes() == single.tobytes()


def test_smoothed_weights_in_run_respect_floor(model):
    args = _cond(3, seed=7)
    ex = ExpertSet(model, seed=3)
    ex.router.fc2.weight.data = np.random.default_rng(0).normal(0, 5, ex.router.fc2.weight.shape).astype(np.float32)
    with no_grad():
        w = ex.run(model, *args, np.array([1, 2, 3])).weights.data
    assert np.all(w >= 0.1 / 3 - 1e-7)
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-6)


def test_streams_are_independent(model):
    """Expert i's latents do not depend on the other experts' parameters."""
    args = _cond(2, seed=8)
    ex = ExpertSet(model, seed=4)
    rng = np.random.default_rng(1)
    for e in ex.experts:
        for _, U in e.lora.values():
            U.data = rng.normal(0, 0.05, U.shape).astype(np.float32)
    with no_grad():
        before = ex.run(model, *args, np.array([4, 4])).latents.data[0].copy()
        for _, U in ex.experts[2].lora.values():
            U.data = U.data + 1.0
        ex.experts[1].prefix.data = ex.experts[1].prefix.data * -3
        after = ex.run(model, *args, np.array([4, 4])).latents.data[0]
    assert before.tobytes() == after.tobytes()
