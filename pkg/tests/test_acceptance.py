"""Acceptance suite: one marked group of checks per criterion.

The conftest summary hook prints a PASS/FAIL line for every criterion at the
end of the run. The cart-pole 21^4 pipeline (criteria 4, 6 and 7) takes about
half an hour on a desktop.
"""

import math

import numpy as np
import pytest
from scipy.stats import spearmanr

from polydec import gps
from polydec.cli import main
from polydec.ddp import DDPConfig, DDPProblem, build_bundles, corner_states, ddp_solve, ddp_solve_batch, err_ddp
from polydec.decomp import Decomposition, count_pure, enumerate_pure
from polydec.lqr import (care_residual, closed_loop_value, linear_model, lqr_analysis,
                         lyapunov_residual, solve_lqr)
from polydec.pipeline import RunConfig, dense_rank, prepare_system, read_report, run_pipeline
from polydec.sim import rollout
from polydec.systems import clamp_input, linearize, load_benchmark
from conftest import linear_system
from test_ddp import A0, B0, Q0, R0, riccati_sweep, rk4_matrices
from test_systems import cartpole_jacobian

C = Decomposition.cascade
D = Decomposition.decoupled

# rows in table order; the biped uses its pseudo-state and pseudo-input groups
MANIP_ROWS = [C([((0,), (0,)), ((1,), (1,))]), C([((1,), (1,)), ((0,), (0,))]),
              D([((0,), (0,)), ((1,), (1,))]), C([((0,), (1,)), ((1,), (0,))]),
              C([((0,), (0, 1)), ((1,), ())]), C([((1,), (0, 1)), ((0,), ())]),
              C([((1,), (0,)), ((0,), (1,))]), D([((0,), (1,)), ((1,), (0,))])]
MANIP_ERR = [2e-4, 1e-3, 1.3e-3, 3e-3, 0.145, 1.2, 0.17, math.inf]
MANIP_RANK = [1, 2, 3, 4, 5, 7, 6, 8]

BIPED_ROWS = [C([((0,), (0,)), ((1,), (1,))]), C([((1,), (1,)), ((0,), (0,))]),
              D([((0,), (0,)), ((1,), (1,))]), C([((1,), (0, 1)), ((0,), ())]),
              C([((0,), (0, 1)), ((1,), ())]), C([((0,), (1,)), ((1,), (0,))]),
              C([((1,), (0,)), ((0,), (1,))]), D([((1,), (0,)), ((0,), (1,))])]
BIPED_ERR = [7.8e-3, 7.9e-3, 0.016, 0.027, 0.34, 0.33, 4.9, math.inf]
BIPED_RANK = [1, 2, 3, 4, 6, 5, 7, 8]

# pi_F(x, pi_tau(theta, thetadot)): the pole torque sees the pole, the cart force sees the cart
POLE_CASCADE = '{"kind":"cascaded","chain":[{"inputs":[1],"states":[2,3]},{"inputs":[0],"states":[0,1]}]}'

criterion = pytest.mark.criterion


# -- 1: counting -------------------------------------------------------------------------

@criterion(1)
@pytest.mark.parametrize("n,m,count", [(4, 2, 44), (6, 2, 188), (2, 2, 8), (3, 3, 180), (6, 4, 110864)])
def test_count_pure(n, m, count):
    assert count_pure(n, m) == count


# -- 2: enumeration matches counting -----------------------------------------------------

@criterion(2)
@pytest.mark.parametrize("n", range(1, 6))
def test_enumeration_count(n):
    for m in range(2, 5):
        sys = linear_system(np.zeros((n, n)), np.ones((n, m)), np.eye(n), np.eye(m))
        decs = enumerate_pure(sys)
        assert len(decs) == count_pure(n, m)
        assert len({d.to_json() for d in decs}) == len(decs)


@criterion(2)
def test_single_input_rejected():
    sys = linear_system([[0.0]], [[1.0]], [[1.0]], [[1.0]])
    for call in (lambda: count_pure(1, 1), lambda: enumerate_pure(sys)):
        with pytest.raises(ValueError):
            call()


# -- 3: LQR tables -----------------------------------------------------------------------

def check_table(sys, rows, ref, ranks):
    errs = [lqr_analysis(sys, d).err for d in rows]
    assert dense_rank(errs) == ranks
    for e, r in zip(errs, ref):
        if math.isinf(r):
            assert math.isinf(e)
        else:
            assert abs(e - r) <= 0.5 * r


@criterion(3)
def test_manipulator_table(manip2):
    check_table(manip2, MANIP_ROWS, MANIP_ERR, MANIP_RANK)


@criterion(3)
def test_biped_table(biped):
    check_table(biped, BIPED_ROWS, BIPED_ERR, BIPED_RANK)


# -- 4, 6, 7: cart-pole 44-set at 21^4 ---------------------------------------------------

@pytest.fixture(scope="session")
def cartpole_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("cartpole44")
    code = main(["verify", "--system", "cartpole", "--grid-scale", repr(2 / 3), "--no-bar", "--out", str(out)])
    cfg = RunConfig(system="cartpole", grid_scale=2 / 3)
    sys = prepare_system(cfg)
    vstar = gps.read_grid(out / "grids" / "0" / "node0.value.pdgrid")[1]
    gcfg = cfg.grid_config()
    eps = gps.grid_epsilon(sys, gcfg, gps.backup_dt(sys, gcfg), float(np.max(vstar)))
    return code, sys, read_report(out), eps


@criterion(4)
def test_cartpole_pipeline_complete(cartpole_run):
    code, sys, report, _ = cartpole_run
    assert code == 0
    assert sys.grid_shape == (21, 21, 21, 21)
    assert len(report.rows) == 45
    assert all(r.err is not None and math.isfinite(r.err) for r in report.rows)


@criterion(4)
def test_pole_cascade_ranks_high(cartpole_run):
    _, _, report, _ = cartpole_run
    row = next(r for r in report.rows if r.serialization == POLE_CASCADE)
    assert row.r <= 4
    assert row.err <= 0.05


@criterion(6)
def test_grid_error_floor(cartpole_run):
    _, _, report, eps = cartpole_run
    assert min(r.err for r in report.rows) >= -eps


@criterion(7)
def test_time_estimate_correlation(cartpole_run):
    _, _, report, _ = cartpole_run
    rows = report.rows[1:]
    rho = spearmanr([r.time_est for r in rows], [r.time_meas for r in rows]).statistic
    print(f"spearman(time_est, time_meas) = {rho:.3f}")
    assert rho >= 0.8


# -- 5: DDP separation -------------------------------------------------------------------

@criterion(5)
def test_ddp_separation(manip2):
    cfg = DDPConfig()
    full = build_bundles(manip2, Decomposition.full(manip2), cfg)[(0,)]
    best = err_ddp(manip2, MANIP_ROWS[0], cfg, full_bundle=full).err
    worst = err_ddp(manip2, MANIP_ROWS[7], cfg, full_bundle=full).err
    assert err_ddp(manip2, Decomposition.full(manip2), cfg, full_bundle=full).err == 0.0
    print(f"err_ddp #1 = {best:.3g}, #8 = {worst:.3g}")
    # #1 sits at the noise floor of the nearest-neighbour estimate, so compare magnitudes
    assert worst > 0 and worst >= 100 * abs(best)


# -- 6: property suite -------------------------------------------------------------------

@criterion(6)
@pytest.mark.parametrize("name", ["cartpole", "manip2", "biped3"])
def test_riccati_and_lyapunov_residuals(name):
    sys = load_benchmark(name)
    model = linear_model(sys)
    _, P = solve_lqr(model.A, model.B, sys.Q, sys.R, sys.lam)
    assert care_residual(model.A, model.B, sys.Q, sys.R, sys.lam, P) <= 1e-8 * (1 + np.linalg.norm(P))
    for d in enumerate_pure(sys):
        a = lqr_analysis(sys, d)
        if not math.isfinite(a.err):
            continue
        Pd = a.value.P
        assert lyapunov_residual(model, a.gain.K, sys.Q, sys.R, sys.lam, Pd) <= 1e-8 * (1 + np.linalg.norm(Pd))
        assert a.err >= -1e-9
        assert np.linalg.eigvalsh(Pd - a.optimal.P).min() >= -1e-9


@criterion(6)
def test_ddp_monotone_costs(manip2):
    problem = DDPProblem(manip2, [0, 1, 2, 3], [0, 1])
    trajs = ddp_solve_batch(problem, corner_states(manip2)[:2], np.zeros((2, 1000, 2)), 1e-3,
                            DDPConfig(max_iter=30))
    for t in trajs:
        c = np.array(t.costs)
        assert np.all(np.diff(c) <= 1e-12 * c[:-1])


@criterion(6)
def test_ddp_matches_riccati():
    lam, dt, N = 0.5, 0.01, 200
    sys = linear_system(A0, B0, Q0, R0, lam=lam, box=5.0)
    x0 = np.array([0.8, -0.3])
    traj = ddp_solve(DDPProblem(sys, [0, 1], [0]), x0, np.zeros((N, 1)), N * dt, dt)
    Ad, Bd = rk4_matrices(A0, B0, dt)
    gains = riccati_sweep(Ad, Bd, Q0, R0, np.exp(-lam * dt * np.arange(N)) * dt)
    np.testing.assert_allclose(traj.K, np.array(gains), atol=1e-6)


@criterion(6)
def test_policy_iteration_improves(cartpole):
    problem = gps.NodeProblem(cartpole, [2, 3], [1], None, gps.backup_dt(cartpole), 9)
    stats = gps.PIStats(record=True)
    gps.policy_iteration(problem, gps.GridConfig(), stats)
    for prev, cur in zip(stats.history, stats.history[1:]):
        assert np.all(cur <= prev + 1e-6 * (1 + np.abs(prev)))


@criterion(6)
def test_controls_within_bounds(manip2):
    lo, hi = manip2.input_lower, manip2.input_upper
    policy = gps.solve_decomposition(manip2, MANIP_ROWS[2])
    X = np.random.default_rng(5).uniform(manip2.S_full[:, 0] - 1, manip2.S_full[:, 1] + 1, size=(400, 4))
    U = gps.eval_composed(policy, X)
    assert np.all(U >= lo) and np.all(U <= hi)
    K = lqr_analysis(manip2, MANIP_ROWS[0]).gain.K
    lqr = lambda x: clamp_input(manip2, manip2.goal_input - manip2.state_difference(x) @ K.T)
    ro = rollout(manip2, lqr, manip2.S_eval[:, 1], 1.0, 1e-3)
    assert np.all(ro.inputs >= lo) and np.all(ro.inputs <= hi)
    bundle = build_bundles(manip2, MANIP_ROWS[2], DDPConfig(horizon=0.5, max_iter=20))
    for b in bundle.values():
        for t in b.trajectories:
            assert np.all(t.U >= lo[list(b.inputs)]) and np.all(t.U <= hi[list(b.inputs)])


@criterion(6)
def test_linearization_matches_analytic(cartpole):
    rng = np.random.default_rng(11)
    for _ in range(5):
        x = rng.uniform(cartpole.S_full[:, 0], cartpole.S_full[:, 1])
        u = rng.uniform(cartpole.input_lower, cartpole.input_upper)
        A, B = linearize(cartpole, x, u)
        Ae, Be = cartpole_jacobian(x, u)
        np.testing.assert_allclose(A, Ae, rtol=1e-4, atol=1e-8)
        np.testing.assert_allclose(B, Be, rtol=1e-4, atol=1e-8)


@criterion(6)
def test_repeated_runs_bitwise_equal(tmp_path, manip2):
    for k in (1, 2):
        run_pipeline(RunConfig(system="manip2", lqr_bar=False, out=str(tmp_path / str(k))))
    for name in ("report.csv", "report.json"):
        assert (tmp_path / "1" / name).read_bytes() == (tmp_path / "2" / name).read_bytes()
    a, b = (gps.solve_decomposition(manip2, MANIP_ROWS[2]) for _ in range(2))
    for na, nb in zip(a.nodes, b.nodes):
        assert na.value.values.tobytes() == nb.value.values.tobytes()
    problem = DDPProblem(manip2, [0, 1, 2, 3], [0, 1])
    s, t = (ddp_solve(problem, manip2.S_eval[:, 0], np.zeros((300, 2)), 0.3, 1e-3) for _ in range(2))
    assert s.X.tobytes() == t.X.tobytes() and s.K.tobytes() == t.K.tobytes()
