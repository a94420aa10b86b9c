import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polydec.decomp import Decomposition
from polydec.ddp import (DDPConfig, DDPProblem, NNPolicy, Trajectory, TrajectoryBundle,
                         build_bundles, corner_states, ddp_solve, ddp_solve_batch, err_ddp,
                         load_bundle, nn_policy, save_bundle)
from conftest import linear_system

A0 = np.array([[0.0, 1.0], [2.0, -0.5]])
B0 = np.array([[0.0], [1.0]])
Q0 = np.diag([1.0, 0.2])
R0 = np.array([[0.05]])


def rk4_matrices(A, B, h):
    """Exact one-step map of classical RK4 with zero-order hold on xdot = A x + B u."""
    I = np.eye(len(A))
    Ad = I + h * A + (h * A) @ (h * A) / 2 + np.linalg.matrix_power(h * A, 3) / 6 \
        + np.linalg.matrix_power(h * A, 4) / 24
    Bd = (h * I + h**2 * A / 2 + h**3 * A @ A / 6 + h**4 * np.linalg.matrix_power(A, 3) / 24) @ B
    return Ad, Bd


def riccati_sweep(Ad, Bd, Q, R, weights):
    """Finite-horizon LQ gains u_k = -K_k x_k for sum_k w_k (x'Qx + u'Ru), zero terminal cost."""
    P = np.zeros_like(Q)
    gains = []
    for w in weights[::-1]:
        Quu = w * R + Bd.T @ P @ Bd
        Qux = Bd.T @ P @ Ad
        K = np.linalg.solve(Quu, Qux)
        P = w * Q + Ad.T @ P @ Ad - Qux.T @ K
        gains.append(K)
    return gains[::-1]


def test_riccati_equivalence():
    lam, dt, T = 0.5, 0.01, 2.0
    sys = linear_system(A0, B0, Q0, R0, lam=lam, box=5.0)
    problem = DDPProblem(sys, [0, 1], [0])
    N = int(round(T / dt))
    x0 = np.array([0.8, -0.3])
    traj = ddp_solve(problem, x0, np.zeros((N, 1)), T, dt)
    assert traj.converged
    Ad, Bd = rk4_matrices(A0, B0, dt)
    gains = riccati_sweep(Ad, Bd, Q0, R0, np.exp(-lam * dt * np.arange(N)) * dt)
    X = [x0]
    for K in gains:
        X.append((Ad - Bd @ K) @ X[-1])
    np.testing.assert_allclose(traj.X, np.array(X), atol=1e-6)
    np.testing.assert_allclose(traj.K, np.array(gains), atol=1e-6)


def test_goal_start_converges_fast():
    sys = linear_system(A0, B0, Q0, R0, lam=0.5, box=5.0)
    traj = ddp_solve(DDPProblem(sys, [0, 1], [0]), np.zeros(2), np.zeros((100, 1)), 1.0, 0.01)
    assert traj.converged and traj.iterations <= 2
    assert traj.cost == pytest.approx(0.0, abs=1e-20)


def test_cost_monotone_and_bounded(manip2):
    problem = DDPProblem(manip2, [0, 1, 2, 3], [0, 1])
    x0 = corner_states(manip2)[:3]
    trajs = ddp_solve_batch(problem, x0, np.zeros((3, 1500, 2)), 1e-3, DDPConfig(max_iter=30))
    for t in trajs:
        c = np.array(t.costs)
        assert np.all(np.diff(c) <= 1e-12 * c[:-1])
        assert np.all(t.U >= manip2.input_lower) and np.all(t.U <= manip2.input_upper)


# -- nearest-neighbour policies -------------------------------------------------------

def toy_bundle(periodic=False):
    """Two straight-line trajectories in 2-D with distinct gains."""
    N = 4
    trajs = []
    for s, offset in enumerate((0.0, 1.0)):
        X = np.stack([np.linspace(0, 1.5, N + 1), np.full(N + 1, offset)], axis=1)
        U = np.arange(N, dtype=float)[:, None] + 10 * s
        K = np.tile(np.array([[[0.5, -2.0]]]), (N, 1, 1)) * (s + 1)
        trajs.append(Trajectory(0.1, 0.1 * np.arange(N + 1), X, X.copy(), U, K, 0.0))
    return TrajectoryBundle((0,), (0, 1), (0,), np.array([[0, 0], [0, 1.0]]), tuple(trajs),
                            np.array([0, 1]))


def toy_policy(**kw):
    return NNPolicy(toy_bundle(), [False, False], [-100.0], [100.0], **kw)


def test_knot_reproduces_input():
    pol = toy_policy()
    for s, t in enumerate(pol.bundle.trajectories):
        np.testing.assert_array_equal(pol(t.X[:-1]), t.U)


def test_tie_goes_to_smaller_index():
    pol = toy_policy()
    # equidistant from (0.375, 0) and (0.375, 1): first trajectory wins
    assert pol.nearest([[0.375, 0.5]])[0] == 1
    # equidistant from t=0 and t=1 knots of the first trajectory
    assert pol.nearest([[0.1875, 0.0]])[0] == 0


def test_gain_direction():
    pol = toy_policy()
    x = pol.bundle.trajectories[0].X[2]
    delta = np.array([0.01, 0.02])
    du = pol(x + delta)[0] - pol(x)[0]
    K = pol.bundle.trajectories[0].K[2]
    np.testing.assert_allclose(du, -K @ delta, rtol=1e-12)


def test_clamped_output():
    pol = NNPolicy(toy_bundle(), [False, False], [-0.5], [0.5])
    u = pol(np.random.default_rng(3).uniform(-5, 5, size=(50, 2)))
    assert np.all(np.abs(u) <= 0.5)


@settings(max_examples=60)
@given(st.lists(st.tuples(st.floats(-8, 8), st.floats(-3, 3)), min_size=1, max_size=10),
       st.booleans())
def test_tree_matches_scan(points, periodic):
    bundle = toy_bundle()
    pol = NNPolicy(bundle, [periodic, False], [-100.0], [100.0])
    X = np.array(points)
    np.testing.assert_array_equal(pol.nearest(X), pol.nearest_scan(X))


def test_periodic_distance():
    pol = NNPolicy(toy_bundle(), [True, False], [-100.0], [100.0])
    # 2 pi - 0.05 wraps to -0.05, closest to the knot at 0
    assert pol.nearest([[2 * np.pi - 0.05, 0.0]])[0] == 0


def test_nn_policy_function(manip2):
    b = toy_bundle()
    b = TrajectoryBundle(b.path, (1, 3), (1,), b.starts, b.trajectories, b.corner_index)
    u = nn_policy(b, b.trajectories[1].X[1], manip2)
    assert u[0] == pytest.approx(manip2.input_upper[1])


# -- bundles and err_ddp ------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_linear():
    sys = linear_system(A0, B0, Q0, R0, lam=0.5, box=1.0)
    cfg = DDPConfig(horizon=1.0, dt=0.01)
    return sys, cfg, build_bundles(sys, Decomposition.full(sys), cfg)


def test_full_self_estimate_zero(small_linear):
    sys, cfg, bundles = small_linear
    est = err_ddp(sys, Decomposition.full(sys), cfg, full_bundle=bundles[(0,)])
    assert est.err == 0.0


def test_bundle_roundtrip(small_linear, tmp_path):
    sys, cfg, bundles = small_linear
    b = bundles[(0,)]
    path = save_bundle(tmp_path / "b.pdgrid", sys, b)
    back = load_bundle(path)
    assert back.k == b.k == 4
    for t, u in zip(b.trajectories, back.trajectories):
        np.testing.assert_array_equal(t.X, u.X)
        np.testing.assert_array_equal(t.K, u.K)
        assert t.cost == u.cost


def test_deduplicated_starts():
    A = np.diag([-1.0, -2.0, -3.0])
    sys = linear_system(A, np.eye(3)[:, :2], np.eye(3), np.eye(2), lam=1.0)
    d = Decomposition.cascade([((0,), (0,)), ((1,), (1, 2))])
    bundles = build_bundles(sys, d, DDPConfig(horizon=0.2, dt=0.01))
    inner = bundles[(0, 0)]
    assert inner.k == 2 and len(inner.corner_index) == 8
    np.testing.assert_array_equal(inner.starts[inner.corner_index], corner_states(sys)[:, [0]])
    assert bundles[(0,)].k == 8


def test_cartpole_corner_bundle(cartpole):
    bundles = build_bundles(cartpole, Decomposition.full(cartpole), DDPConfig(max_iter=20))
    b = bundles[(0,)]
    assert b.k == 16
    for t in b.trajectories:
        assert len(t.U) == 5000
        assert np.all(np.abs(t.U) <= 6.0)


def test_biped_start_count(biped):
    b = build_bundles(biped, Decomposition.full(biped), DDPConfig(max_iter=1))[(0,)]
    assert b.k == 64 and len(b.trajectories[0].U) == 4000
    for t in b.trajectories:
        assert np.all(t.U >= biped.input_lower) and np.all(t.U <= biped.input_upper)
