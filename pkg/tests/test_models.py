import math

import numpy as np
import pytest

from conftest import random_batch
from diloco_desk.models import (
    Batch,
    ModelError,
    ModelSpec,
    build_layout,
    finite_diff_check,
    grad,
    init_params,
    loss,
    loss_and_grad,
)
from diloco_desk.numkit import LayoutError, ParamVector, Rng

# Frozen outputs of the straight-line reference forward passes below.
PINNED_MLP_LOSS = 1.6253562464865194
PINNED_SOFTMAX_LOSS = 1.2987483427142579


def reference_mlp_loss(t, ctx, tgt):
    total = 0.0
    for c, y in zip(ctx, tgt):
        x = list(t["embed"][c[0]]) + list(t["embed"][c[1]])
        h = [
            math.tanh(sum(x[i] * t["hidden0.weight"][i][j] for i in range(4)) + t["hidden0.bias"][j])
            for j in range(3)
        ]
        z = [sum(h[i] * t["out.weight"][i][v] for i in range(3)) + t["out.bias"][v] for v in range(5)]
        total += math.log(sum(math.exp(zz) for zz in z)) - z[y]
    return total / len(tgt)


def reference_softmax_loss(t, ctx, tgt):
    total = 0.0
    for c, y in zip(ctx, tgt):
        z = [t["weight"][c[0]][v] + t["bias"][v] for v in range(4)]
        total += math.log(sum(math.exp(zz) for zz in z)) - z[y]
    return total / len(tgt)


def as_lists(p):
    return {k: v.tolist() for k, v in p.tensors().items()}


def test_pinned_mlp_forward():
    spec = ModelSpec(kind="mlp-char-lm", vocab_size=5, context_length=2, hidden_dims=(3,),
                     embed_dim=2, init_scale=0.8, init_seed=11)
    p = init_params(spec)
    ctx, tgt = [[0, 1], [4, 2], [3, 3]], [2, 0, 4]
    assert reference_mlp_loss(as_lists(p), ctx, tgt) == pytest.approx(PINNED_MLP_LOSS, abs=1e-14)
    assert loss(p, Batch(ctx, tgt, 5), spec) == pytest.approx(PINNED_MLP_LOSS, abs=1e-12)


def test_pinned_softmax_forward():
    spec = ModelSpec(kind="softmax-regression", vocab_size=4, context_length=1, hidden_dims=(),
                     init_scale=1.0, init_seed=12)
    p = init_params(spec)
    ctx, tgt = [[1], [3], [1]], [0, 2, 3]
    assert reference_softmax_loss(as_lists(p), ctx, tgt) == pytest.approx(PINNED_SOFTMAX_LOSS, abs=1e-14)
    assert loss(p, Batch(ctx, tgt, 4), spec) == pytest.approx(PINNED_SOFTMAX_LOSS, abs=1e-12)


# -- spec / init ---------------------------------------------------------------


def test_layout_size_hand_count():
    d = 16
    spec = ModelSpec(vocab_size=16, context_length=4, hidden_dims=(32,), embed_dim=d)
    assert build_layout(spec).size == 16 * d + (4 * d) * 32 + 32 + 32 * 16 + 16
    assert build_layout(spec).names == [
        "embed", "hidden0.weight", "hidden0.bias", "out.weight", "out.bias"
    ]


def test_init_deterministic(mlp_spec):
    assert init_params(mlp_spec).values.tobytes() == init_params(mlp_spec).values.tobytes()


def test_init_scale_zero_gives_zeros(mlp_spec):
    from dataclasses import replace

    assert not init_params(replace(mlp_spec, init_scale=0.0)).values.any()


def test_init_within_scale(mlp_spec):
    v = init_params(mlp_spec).values
    assert np.abs(v).max() <= mlp_spec.init_scale
    assert abs(v.mean()) < 0.05


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(kind="softmax-regression", hidden_dims=(4,), context_length=1),
        dict(kind="softmax-regression", hidden_dims=(), context_length=2),
        dict(kind="mlp-char-lm", hidden_dims=(), context_length=3),
        dict(kind="mlp-char-lm", hidden_dims=(4,), context_length=1),
        dict(kind="transformer"),
    ],
)
def test_spec_validation(kwargs):
    with pytest.raises(ModelError):
        ModelSpec(**kwargs)


def test_batch_validation():
    with pytest.raises(ModelError):
        Batch([[0, 5]], [1], 5)
    with pytest.raises(ModelError):
        Batch(np.zeros((0, 2), dtype=int), np.zeros(0, dtype=int), 5)


# -- loss ----------------------------------------------------------------------


@pytest.mark.parametrize("fixture", ["softmax_spec", "mlp_spec"])
def test_zero_params_give_log_vocab(fixture, request):
    spec = request.getfixturevalue(fixture)
    p = ParamVector.zeros(build_layout(spec))
    for size in (1, 4, 64):
        assert loss(p, random_batch(spec, size, size), spec) == np.log(spec.vocab_size)
    assert loss(p, random_batch(spec, 7, 7), spec) == pytest.approx(np.log(spec.vocab_size), abs=1e-15)


def test_duplicated_batch_same_loss(mlp_spec):
    p = init_params(mlp_spec)
    b = random_batch(mlp_spec, 9, 1)
    assert loss(p, Batch.concat([b, b]), mlp_spec) == pytest.approx(loss(p, b, mlp_spec), abs=1e-15)


def test_layout_mismatch(mlp_spec, softmax_spec):
    with pytest.raises(LayoutError):
        loss(init_params(softmax_spec), random_batch(mlp_spec, 4, 0), mlp_spec)
    with pytest.raises(LayoutError):
        loss(init_params(mlp_spec), random_batch(softmax_spec, 4, 0), mlp_spec)


# -- grad ----------------------------------------------------------------------


def test_softmax_zero_params_gradient_rows_sum_to_zero(softmax_spec):
    V = softmax_spec.vocab_size
    ctx = np.arange(2 * V).reshape(-1, 1) % V
    tgt = np.arange(2 * V) % V
    g = grad(ParamVector.zeros(build_layout(softmax_spec)), Batch(ctx, tgt, V), softmax_spec)
    assert abs(g.tensor("bias").sum()) < 1e-15
    np.testing.assert_allclose(g.tensor("weight").sum(axis=1), 0.0, atol=1e-15)


@pytest.mark.parametrize("fixture", ["softmax_spec", "mlp_spec"])
def test_loss_and_grad_consistent(fixture, request):
    spec = request.getfixturevalue(fixture)
    p = init_params(spec)
    b = random_batch(spec, 10, 2)
    value, g = loss_and_grad(p, b, spec)
    assert value == loss(p, b, spec)
    assert g.values.tobytes() == grad(p, b, spec).values.tobytes()


@pytest.mark.parametrize(
    "fixture,bound", [("softmax_spec", 1e-6), ("mlp_spec", 1e-4)]
)
def test_finite_difference_agreement(fixture, bound, request):
    spec = request.getfixturevalue(fixture)
    for case in range(10):
        p = ParamVector(build_layout(spec), Rng(case, 1).uniform(build_layout(spec).size, -1, 1))
        b = random_batch(spec, 12, 100 + case)
        assert finite_diff_check(p, b, spec, 64, Rng(case, 2)) < bound


def test_finite_diff_check_rejects_zero_probes(mlp_spec):
    with pytest.raises(ValueError):
        finite_diff_check(init_params(mlp_spec), random_batch(mlp_spec, 2, 0), mlp_spec, 0, Rng(0))


@pytest.mark.parametrize("fixture", ["softmax_spec", "mlp_spec"])
def test_shard_linearity(fixture, request):
    spec = request.getfixturevalue(fixture)
    p = init_params(spec)
    shards = [random_batch(spec, 8, s) for s in range(4)]
    full = grad(p, Batch.concat(shards), spec).values
    avg = sum(grad(p, s, spec).values for s in shards) / 4
    np.testing.assert_allclose(avg, full, rtol=0, atol=1e-12)


@pytest.mark.parametrize("fixture", ["softmax_spec", "mlp_spec"])
def test_permutation_invariance(fixture, request):
    spec = request.getfixturevalue(fixture)
    p = init_params(spec)
    b = random_batch(spec, 16, 5)
    perm = Rng(8).permutation(16)
    pb = Batch(b.contexts[perm], b.targets[perm], b.vocab_size)
    assert abs(loss(p, pb, spec) - loss(p, b, spec)) <= 1e-12
    np.testing.assert_allclose(grad(p, pb, spec).values, grad(p, b, spec).values, atol=1e-12, rtol=0)
