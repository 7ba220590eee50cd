import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diloco_desk.numkit import LayoutError, ParamVector, Rng, TensorLayout, newton_schulz_orthogonalize
from diloco_desk.optim import (
    AdamWConfig,
    AdamWState,
    MuonConfig,
    MuonState,
    OptimError,
    OuterState,
    SGDConfig,
    adamw_step,
    muon_step,
    outer_step,
    outer_step_from_replicas,
    sgd_step,
    with_lr,
)

SCALAR = TensorLayout.from_shapes([("theta", (1,))])
MIXED = TensorLayout.from_shapes([("w", (4, 4)), ("b", (4,)), ("v", (3, 5))])


def vec(layout, values):
    return ParamVector(layout, np.asarray(values, dtype=float))


def rand(layout, seed, scale=1.0):
    return ParamVector(layout, Rng(seed, 0).uniform(layout.size, -scale, scale))


# -- AdamW -----------------------------------------------------------------------


def test_adamw_first_step_hand_evaluated():
    cfg = AdamWConfig(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0)
    p, s = adamw_step(vec(SCALAR, [1.0]), vec(SCALAR, [0.5]), AdamWState.zeros(SCALAR), cfg)
    # m_hat = 0.5, v_hat = 0.25 -> update = 0.1 * 0.5 / (0.5 + 1e-8)
    assert s.t == 1
    assert p.values[0] == pytest.approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8), abs=1e-15)
    assert p.values[0] == pytest.approx(0.9, abs=1e-8)
    assert s.m.values[0] == pytest.approx(0.05, abs=1e-16)
    assert s.v.values[0] == pytest.approx(0.00025, abs=1e-18)


def test_adamw_zero_grad_fixed_point():
    p = rand(MIXED, 1)
    out, s = adamw_step(p, ParamVector.zeros(MIXED), AdamWState.zeros(MIXED), AdamWConfig())
    assert out.bitwise_equal(p)
    assert s.t == 1


def test_adamw_decoupled_decay():
    cfg = AdamWConfig(lr=0.05, weight_decay=0.2)
    p = rand(MIXED, 2)
    out, _ = adamw_step(p, ParamVector.zeros(MIXED), AdamWState.zeros(MIXED), cfg)
    np.testing.assert_allclose(out.values, p.values * (1 - 0.05 * 0.2), rtol=4e-16, atol=0)


def reference_adamw(p, grads, lr, b1, b2, eps, wd):
    """Straight-line scalar transcription of the AdamW recurrence."""
    p = list(p)
    m = [0.0] * len(p)
    v = [0.0] * len(p)
    for t, g in enumerate(grads, start=1):
        for i in range(len(p)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
            mh = m[i] / (1 - b1 ** t)
            vh = v[i] / (1 - b2 ** t)
            p[i] = p[i] - lr * (mh / (math.sqrt(vh) + eps) + wd * p[i])
    return p


def test_adamw_matches_reference_over_100_steps():
    layout = TensorLayout.from_shapes([("x", (6,))])
    cfg = AdamWConfig(lr=0.01, beta1=0.8, beta2=0.99, eps=1e-6, weight_decay=0.05)
    p0 = rand(layout, 3)
    grads = [Rng(4, t).normal(6) for t in range(100)]
    p, s = p0, AdamWState.zeros(layout)
    for g in grads:
        p, s = adamw_step(p, ParamVector(layout, g), s, cfg)
    ref = reference_adamw(p0.values.tolist(), [g.tolist() for g in grads], 0.01, 0.8, 0.99, 1e-6, 0.05)
    np.testing.assert_allclose(p.values, ref, rtol=0, atol=1e-12)
    assert s.t == 100


def test_adamw_layout_mismatch():
    with pytest.raises(LayoutError):
        adamw_step(rand(MIXED, 0), rand(SCALAR, 0), AdamWState.zeros(MIXED), AdamWConfig())


def test_adamw_inputs_untouched():
    p, g = rand(MIXED, 5), rand(MIXED, 6)
    s = AdamWState.zeros(MIXED)
    before = (p.values.copy(), g.values.copy())
    adamw_step(p, g, s, AdamWConfig())
    np.testing.assert_array_equal(p.values, before[0])
    np.testing.assert_array_equal(g.values, before[1])
    assert not s.m.values.any()


@pytest.mark.parametrize("kwargs", [dict(beta1=1.0), dict(beta2=-0.1), dict(eps=0.0), dict(weight_decay=-1)])
def test_adamw_config_validation(kwargs):
    with pytest.raises(OptimError):
        AdamWConfig(**kwargs)


# -- SGD / Muon ---------------------------------------------------------------


def test_sgd_step():
    p, _ = sgd_step(vec(SCALAR, [1.0]), vec(SCALAR, [2.0]), None, SGDConfig(lr=0.25))
    assert p.values[0] == 0.5


def test_muon_zero_grad_fixed_point():
    p = rand(MIXED, 7)
    out, s = muon_step(p, ParamVector.zeros(MIXED), MuonState.zeros(MIXED), MuonConfig())
    assert out.bitwise_equal(p)


def test_muon_orthogonal_grad_direction():
    layout = TensorLayout.from_shapes([("w", (2, 2))])
    a = 0.9
    q = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    cfg = MuonConfig(lr=0.1, momentum=0.0)
    p = ParamVector.zeros(layout)
    out, _ = muon_step(p, ParamVector(layout, q.ravel()), MuonState.zeros(layout), cfg)
    direction = (p.values - out.values).reshape(2, 2) / 0.1
    np.testing.assert_allclose(direction, newton_schulz_orthogonalize(q, 5), atol=1e-14)
    np.testing.assert_allclose(direction, q, atol=1e-3)


def test_muon_bias_falls_back_to_adamw():
    layout = TensorLayout.from_shapes([("b", (5,))])
    cfg = MuonConfig(adamw=AdamWConfig(lr=0.03, weight_decay=0.1))
    p, g = rand(layout, 8), rand(layout, 9)
    mu_p, mu_s = muon_step(p, g, MuonState.zeros(layout), cfg)
    ad_p, ad_s = adamw_step(p, g, AdamWState.zeros(layout), cfg.adamw)
    assert mu_p.bitwise_equal(ad_p)
    assert mu_s.adamw.m.bitwise_equal(ad_s.m)


def test_muon_momentum_buffer_and_tall_scaling():
    layout = TensorLayout.from_shapes([("w", (8, 2))])
    cfg = MuonConfig(lr=1.0, momentum=0.5)
    g = rand(layout, 10)
    p0 = ParamVector.zeros(layout)
    p1, s1 = muon_step(p0, g, MuonState.zeros(layout), cfg)
    np.testing.assert_array_equal(s1.buffer.values, g.values)
    expected = newton_schulz_orthogonalize(g.values.reshape(8, 2), 5) * 2.0  # sqrt(8/2)
    np.testing.assert_allclose(-p1.values.reshape(8, 2), expected, atol=1e-14)
    _, s2 = muon_step(p1, g, s1, cfg)
    np.testing.assert_allclose(s2.buffer.values, 1.5 * g.values, atol=1e-15)


def test_with_lr_scales_both_muon_rates():
    cfg = with_lr(MuonConfig(lr=0.02, adamw=AdamWConfig(lr=0.01)), 0.5)
    assert cfg.lr == 0.01 and cfg.adamw.lr == 0.005


# -- outer step -----------------------------------------------------------------


def test_outer_single_worker_collapse():
    theta, end = rand(MIXED, 11), rand(MIXED, 12)
    outer = OuterState.zeros(MIXED, mu=0.0, eta=1.0, nesterov=False)
    new, _ = outer_step(theta, [end - theta], outer)
    np.testing.assert_allclose(new.values, end.values, atol=1e-15, rtol=0)
    new2, _, _ = outer_step_from_replicas(theta, [end], outer)
    assert new2.bitwise_equal(end)


def test_outer_recurrence_example():
    theta = rand(MIXED, 13)
    ones = ParamVector(MIXED, np.ones(MIXED.size))
    new, state = outer_step(theta, [ones], OuterState.zeros(MIXED, 0.9, 0.8, nesterov=False))
    np.testing.assert_array_equal(state.v.values, 1.0)
    np.testing.assert_array_equal(new.values, theta.values + 0.8)


def test_outer_nesterov_form():
    theta, d, v0 = rand(MIXED, 14), rand(MIXED, 15), rand(MIXED, 16)
    new, state = outer_step(theta, [d], OuterState(v0, 0.9, 0.8, nesterov=True))
    v1 = 0.9 * v0.values + d.values
    np.testing.assert_array_equal(state.v.values, v1)
    np.testing.assert_allclose(new.values, theta.values + 0.8 * (0.9 * v1 + d.values), atol=1e-15)


def test_outer_identical_deltas_equal_single():
    theta, d = rand(MIXED, 17), rand(MIXED, 18)
    outer = OuterState.zeros(MIXED, 0.9, 0.8)
    one, s1 = outer_step(theta, [d], outer)
    many, s4 = outer_step(theta, [d, d, d, d], outer)
    np.testing.assert_allclose(many.values, one.values, atol=1e-15, rtol=0)
    np.testing.assert_allclose(s4.v.values, s1.v.values, atol=1e-15, rtol=0)


def test_outer_fedavg_collapse():
    theta = rand(MIXED, 19)
    ends = [rand(MIXED, 20 + i) for i in range(5)]
    outer = OuterState.zeros(MIXED, mu=0.0, eta=1.0, nesterov=False)
    new, _ = outer_step(theta, [e - theta for e in ends], outer)
    np.testing.assert_allclose(new.values, np.mean([e.values for e in ends], axis=0), atol=1e-12, rtol=0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**31), st.booleans())
def test_outer_permutation_invariant(k, seed, nesterov):
    theta = rand(MIXED, seed)
    deltas = [rand(MIXED, seed + 1 + i, 0.1) for i in range(k)]
    outer = OuterState(rand(MIXED, seed + 99, 0.1), 0.9, 0.8, nesterov)
    a, _ = outer_step(theta, deltas, outer)
    perm = Rng(seed, 5).permutation(k)
    b, _ = outer_step(theta, [deltas[i] for i in perm], outer)
    np.testing.assert_allclose(a.values, b.values, atol=1e-12, rtol=0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**31), st.booleans(),
       st.floats(0.0, 0.99), st.floats(0.1, 1.5))
def test_replica_form_matches_delta_form(k, seed, nesterov, mu, eta):
    theta = rand(MIXED, seed)
    ends = [theta + rand(MIXED, seed + 1 + i, 0.1) for i in range(k)]
    outer = OuterState(rand(MIXED, seed + 50, 0.1), mu, eta, nesterov)
    a, sa = outer_step(theta, [e - theta for e in ends], outer)
    b, sb, deltas = outer_step_from_replicas(theta, ends, outer)
    np.testing.assert_allclose(a.values, b.values, atol=1e-12, rtol=0)
    assert sa.v.bitwise_equal(sb.v)
    assert len(deltas) == k


@pytest.mark.parametrize("mu", [0.9, 0.5])
def test_momentum_decays_geometrically(mu):
    theta = rand(MIXED, 30)
    state = OuterState(rand(MIXED, 31), mu, 0.8, nesterov=True)
    zero = ParamVector.zeros(MIXED)
    for _ in range(5):
        prev = state.v
        _, state = outer_step(theta, [zero, zero], state)
        np.testing.assert_array_equal(state.v.values, mu * prev.values)
        if mu == 0.5:
            assert state.v.norm() == mu * prev.norm()
        else:
            assert state.v.norm() == pytest.approx(mu * prev.norm(), rel=4e-16)
        assert state.v.norm() <= prev.norm()


def test_outer_errors():
    with pytest.raises(OptimError):
        outer_step(rand(MIXED, 0), [], OuterState.zeros(MIXED))
    with pytest.raises(LayoutError):
        outer_step(rand(MIXED, 0), [rand(SCALAR, 0)], OuterState.zeros(MIXED))
