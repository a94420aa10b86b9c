import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polydec.decomp import Decomposition, enumerate_pure
from polydec.lqr import (LinearModel, SaturationConfig, Unstabilizable, assemble_gain,
                         box_mean_quadratic, care_residual, closed_loop_value,
                         decomposition_gains, err_lqr, linear_model, lqr_analysis,
                         lqr_saturated_error, lyapunov_residual, solve_lqr, subsystem_model)
from polydec.systems import linearize
from conftest import linear_system

POLE = Decomposition.cascade([((1,), (2, 3)), ((0,), (0, 1))])
SPLIT = Decomposition.decoupled([((0,), (0, 1)), ((1,), (2, 3))])


def scalar_model(a, b):
    return LinearModel(np.array([[a]]), np.array([[b]]), np.zeros(1), np.zeros(1))


# -- Riccati ------------------------------------------------------------------------

def test_scalar_care():
    K, P = solve_lqr(0.0, 1.0, 1.0, 1.0, 0.0)
    assert P[0, 0] == pytest.approx(1.0, abs=1e-10)
    assert K[0, 0] == pytest.approx(1.0, abs=1e-10)


def test_scalar_care_discount_shift():
    # a - lam/2 = 0 reduces to the undiscounted scalar problem above
    K, P = solve_lqr(1.0, 1.0, 1.0, 1.0, 2.0)
    assert P[0, 0] == pytest.approx(1.0, abs=1e-10)
    assert K[0, 0] == pytest.approx(1.0, abs=1e-10)


def test_unstabilizable():
    with pytest.raises(Unstabilizable):
        solve_lqr(np.eye(2), np.array([[1.0], [0.0]]), np.eye(2), np.eye(1), 0.5)


@pytest.mark.parametrize("name", ["cartpole", "manip2", "biped3"])
def test_care_residual(name, request):
    sys = request.getfixturevalue({"cartpole": "cartpole", "manip2": "manip2", "biped3": "biped"}[name])
    model = linear_model(sys)
    K, P = solve_lqr(model.A, model.B, sys.Q, sys.R, sys.lam)
    assert care_residual(model.A, model.B, sys.Q, sys.R, sys.lam, P) <= 1e-8 * (1 + np.linalg.norm(P))


# -- Lyapunov -----------------------------------------------------------------------

def test_scalar_lyapunov():
    v = closed_loop_value(scalar_model(1.0, 1.0), [[2.0]], [[1.0]], [[1.0]], 0.0)
    assert v.stable
    assert v.P[0, 0] == pytest.approx(2.5, abs=1e-12)


def test_destabilizing_gain():
    # a - bK = 0.5 exceeds the margin -lam/2
    v = closed_loop_value(scalar_model(1.0, 1.0), [[0.5]], [[1.0]], [[1.0]], 0.2)
    assert not v.stable
    assert np.isinf(v(np.zeros(1)))


def test_optimal_gain_reproduces_riccati(cartpole):
    model = linear_model(cartpole)
    K, P = solve_lqr(model.A, model.B, cartpole.Q, cartpole.R, cartpole.lam)
    v = closed_loop_value(model, K, cartpole.Q, cartpole.R, cartpole.lam)
    np.testing.assert_allclose(v.P, P, atol=1e-8 * (1 + np.abs(P).max()))
    res = lyapunov_residual(model, K, cartpole.Q, cartpole.R, cartpole.lam, v.P)
    assert res <= 1e-8 * (1 + np.linalg.norm(v.P))


# -- subsystem extraction ------------------------------------------------------------

def test_decoupled_pole_node(cartpole):
    node = SPLIT.roots[1]
    sub = subsystem_model(cartpole, node, {})
    A, B = linearize(cartpole, cartpole.goal_state, cartpole.goal_input)
    np.testing.assert_array_equal(sub.A, A[2:, 2:])
    np.testing.assert_array_equal(sub.B, B[2:, [1]])


def test_zero_inner_gain_matches_decoupled(cartpole):
    outer = POLE.roots[0]
    inner = outer.children[0]
    sub = subsystem_model(cartpole, outer, {inner: np.zeros((1, 2))})
    A, B = linearize(cartpole, cartpole.goal_state, cartpole.goal_input)
    assert not sub.Pi.any()
    np.testing.assert_array_equal(sub.A, A)
    np.testing.assert_array_equal(sub.B, B[:, [0]])


def test_full_node_identity(cartpole):
    sub = subsystem_model(cartpole, Decomposition.full(cartpole).roots[0], {})
    A, B = linearize(cartpole, cartpole.goal_state, cartpole.goal_input)
    np.testing.assert_array_equal(sub.A, A)
    np.testing.assert_array_equal(sub.B, B)


def test_missing_inner_gain(cartpole):
    with pytest.raises(KeyError):
        subsystem_model(cartpole, POLE.roots[0], {})


# -- assembled gains -----------------------------------------------------------------

def test_block_diagonal(cartpole):
    g = assemble_gain(cartpole, SPLIT, decomposition_gains(cartpole, SPLIT))
    expected = np.array([[1, 1, 0, 0], [0, 0, 1, 1]], dtype=bool)
    np.testing.assert_array_equal(g.block_mask, expected)
    assert np.all(g.K[~g.block_mask] == 0.0)


def test_block_lower_triangular(cartpole):
    g = assemble_gain(cartpole, POLE, decomposition_gains(cartpole, POLE))
    # outer F row sees every state, inner tau row only (theta, thetadot)
    np.testing.assert_array_equal(g.block_mask, [[1, 1, 1, 1], [0, 0, 1, 1]])
    assert np.all(g.K[~g.block_mask] == 0.0)


def test_full_gain_dense(cartpole):
    d = Decomposition.full(cartpole)
    a = lqr_analysis(cartpole, d)
    assert a.gain.block_mask.all()
    np.testing.assert_allclose(a.gain.K, a.K_opt, rtol=1e-12)
    assert a.err == 0.0


# -- err_lqr --------------------------------------------------------------------------

def test_box_mean_quadratic_identity(cartpole):
    # E[dx' dx] for a uniform box is sum(width^2 / 12) + |mean offset|^2
    w = cartpole.S_eval[:, 1] - cartpole.S_eval[:, 0]
    assert box_mean_quadratic(cartpole, np.eye(4)) == pytest.approx(np.sum(w**2) / 12)


@pytest.mark.parametrize("name", ["cartpole", "manip2", "biped3"])
def test_err_nonnegative_and_psd(name):
    from polydec.systems import load_benchmark
    sys = load_benchmark(name)
    for d in enumerate_pure(sys):
        a = lqr_analysis(sys, d)
        if not np.isfinite(a.err):
            continue
        assert a.err >= -1e-9
        assert np.linalg.eigvalsh(a.value.P - a.optimal.P).min() >= -1e-9


def test_biped_row_one(biped):
    d = Decomposition.cascade([((0,), (0,)), ((1,), (1,))])
    assert err_lqr(biped, d) == pytest.approx(7.8e-3, rel=0.5)


def test_biped_row_eight(biped):
    d = Decomposition.decoupled([((1,), (0,)), ((0,), (1,))])
    assert err_lqr(biped, d) == np.inf


@settings(max_examples=15, deadline=None)
@given(st.floats(0.01, 100.0))
def test_cost_scaling(c):
    from polydec.systems import load_benchmark
    sys = load_benchmark("manip2")
    scaled = dataclasses.replace(sys, Q=c * sys.Q, R=c * sys.R)
    decs = enumerate_pure(sys)
    base = np.array([err_lqr(sys, d) for d in decs])
    new = np.array([err_lqr(scaled, d) for d in decs])
    fin = np.isfinite(base)
    np.testing.assert_allclose(new[fin], c * base[fin], rtol=1e-6, atol=1e-12)
    assert np.array_equal(np.isfinite(new), fin)
    assert list(np.argsort(new, kind="stable")) == list(np.argsort(base, kind="stable"))


# -- input-bound error bar ---------------------------------------------------------------

def coupled_linear():
    A = np.array([[0.0, 1.0, 0.0, 0.0], [-1.0, 0.0, 0.5, 0.0], [0.0, 0.0, 0.0, 1.0], [0.3, 0.0, -2.0, 0.0]])
    B = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
    return linear_system(A, B, np.diag([1.0, 0.1, 1.0, 0.1]), 0.1 * np.eye(2), lam=1.0)


def test_saturation_unbounded_equals_lqr():
    sys = coupled_linear()
    cfg = SaturationConfig(horizon=15.0, dt=1e-3, starts="gauss")
    res = lqr_saturated_error(sys, SPLIT, cfg)
    assert not res.flagged
    assert res.error == pytest.approx(err_lqr(sys, SPLIT), abs=1e-6)


def test_saturation_zero_box():
    sys = coupled_linear()
    sys = dataclasses.replace(sys, S_eval=np.zeros((4, 2)))
    assert lqr_saturated_error(sys, SPLIT, SaturationConfig(horizon=2.0)).error == 0.0


def test_saturation_gap_exceeds_lqr(cartpole):
    # input bounds make the decoupled split worse than the linear estimate predicts
    res = lqr_saturated_error(cartpole, SPLIT)
    assert res.error > err_lqr(cartpole, SPLIT) > 0.0
