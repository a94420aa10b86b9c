"""Box-constrained DDP, trajectory bundles, nearest-neighbour sub-policies and err_ddp.

Every node problem is discretised with one RK4 step per knot (inputs held
over the step), the same step :mod:`polydec.sim` uses, so a bundle's stored
trajectories are reproduced exactly when its own policy is rolled out.

Stored policies take the form ``u = clamp(U - K (x - Xref))``.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
from scipy.spatial import cKDTree

from .decomp import Decomposition, SubPolicyNode
from .gps import GridSpec, read_grid, write_grid
from .lqr import Unstabilizable, decomposition_gains
from .sim import rk4_step, rollout_batch
from .lqr import box_corners
from .systems import HORIZONS, ControlSystem, NumericalError, fd_steps, system_to_dict, wrap_angle

ALPHAS = 0.5 ** np.arange(11)


class DDPStall(NumericalError):
    """No acceptable step even at maximum regularisation."""

    def __init__(self, message: str, best: "Trajectory | None" = None):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class DDPConfig:
    horizon: float | None = None
    dt: float = 1e-3
    tol: float = 1e-8
    max_iter: int = 500
    mu_init: float = 1e-6
    mu_min: float = 1e-6
    mu_max: float = 1e10
    ceiling_factor: float = 100.0

    def horizon_for(self, sys: ControlSystem) -> float:
        return self.horizon if self.horizon is not None else HORIZONS.get(sys.name, 4.0)


@dataclass(frozen=True, eq=False)
class Trajectory:
    dt: float
    times: np.ndarray   # (N+1,)
    X: np.ndarray       # (N+1, nx)
    Xref: np.ndarray    # (N+1, nx)
    U: np.ndarray       # (N, nu)
    K: np.ndarray       # (N, nu, nx)
    cost: float
    iterations: int = 0
    converged: bool = True
    costs: tuple = ()


@dataclass(frozen=True, eq=False)
class TrajectoryBundle:
    path: tuple[int, ...]
    states: tuple[int, ...]
    inputs: tuple[int, ...]
    starts: np.ndarray          # (k, nx) node start states
    trajectories: tuple[Trajectory, ...]
    corner_index: np.ndarray    # system corner -> trajectory

    @property
    def k(self) -> int:
        return len(self.trajectories)

    @property
    def flagged(self) -> tuple[int, ...]:
        return tuple(s for s, t in enumerate(self.trajectories) if not t.converged)


# --------------------------------------------------------------------------
# Nearest-neighbour policy
# --------------------------------------------------------------------------


def _wrapped_diff(d: np.ndarray, periodic: np.ndarray) -> np.ndarray:
    if periodic.any():
        d = d.copy()
        d[..., periodic] = wrap_angle(d[..., periodic])
    return d


class NNPolicy:
    """Linear feedback around the nearest knot of a bundle.

    The nearest knot minimises the Euclidean distance with periodic axes
    wrapped; ties go to the smaller trajectory index, then the smaller time
    index. A k-d tree proposes candidates and a flat scan settles ties.
    """

    def __init__(self, bundle: TrajectoryBundle, periodic, lower, upper, candidates: int = 4):
        self.bundle = bundle
        self.states = bundle.states
        self.inputs = bundle.inputs
        self.periodic = np.asarray(periodic, dtype=bool)
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        trajs = bundle.trajectories
        self.N = len(trajs[0].U)
        self.knots = np.concatenate([t.X[:-1] for t in trajs])       # flat index s*N + t
        self.Xref = np.concatenate([t.Xref[:-1] for t in trajs])
        self.U = np.concatenate([t.U for t in trajs])
        self.K = np.concatenate([t.K for t in trajs])
        self.candidates = min(candidates, len(self.knots))
        box = np.where(self.periodic, 2 * np.pi, 0.0)
        self._box = box
        self.tree = cKDTree(self._tree_coords(self.knots), boxsize=box if self.periodic.any() else None)

    def _tree_coords(self, x):
        y = np.array(x, dtype=float)
        if self.periodic.any():
            y[:, self.periodic] = np.mod(y[:, self.periodic], 2 * np.pi)
            y[:, self.periodic] = np.where(y[:, self.periodic] >= 2 * np.pi, 0.0, y[:, self.periodic])
        return y

    def distances(self, x: np.ndarray, which=None) -> np.ndarray:
        knots = self.knots if which is None else self.knots[which]
        d = _wrapped_diff(knots - x, self.periodic)
        return np.sqrt(np.sum(d * d, axis=-1))

    def nearest_scan(self, X) -> np.ndarray:
        """Exact linear scan (reference implementation of the search)."""
        X = np.atleast_2d(X)
        return np.array([int(np.argmin(self.distances(x))) for x in X])

    def nearest(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        k = self.candidates
        _, cand = self.tree.query(self._tree_coords(X), k=k)
        cand = cand.reshape(len(X), k)
        cand = np.sort(cand, axis=1)
        d = self.distances(X[:, None, :], cand)
        best = d.min(axis=1)
        out = cand[np.arange(len(X)), np.argmax(d == best[:, None], axis=1)]
        # every knot at the minimal distance must be among the candidates
        if k < len(self.knots):
            for p in np.flatnonzero(d.max(axis=1) <= best * (1 + 1e-9) + 1e-300):
                out[p] = int(np.argmin(self.distances(X[p])))
        return out

    def evaluate(self, X):
        """Inputs, their state Jacobian and the clamp mask at states ``X`` (B, nx)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        j = self.nearest(X)
        dev = _wrapped_diff(X - self.Xref[j], self.periodic)
        raw = self.U[j] - np.einsum("bij,bj->bi", self.K[j], dev)
        u = np.clip(raw, self.lower, self.upper)
        free = (raw >= self.lower) & (raw <= self.upper)
        G = np.where(free[:, :, None], -self.K[j], 0.0)
        return u, G, free

    def __call__(self, X):
        return self.evaluate(X)[0]


class NNComposed:
    """Nearest-neighbour sub-policies assembled into (part of) the input vector."""

    def __init__(self, sys: ControlSystem, policies: list[NNPolicy]):
        self.sys = sys
        self.policies = policies

    @property
    def input_indices(self) -> list[int]:
        return sorted(i for p in self.policies for i in p.inputs)

    def evaluate(self, X, states):
        """Inputs for the composed inputs and d(inputs)/d(X[:, states])."""
        X = np.atleast_2d(X)
        order = self.input_indices
        row = {i: r for r, i in enumerate(order)}
        col = {s: c for c, s in enumerate(states)}
        U = np.zeros((len(X), len(order)))
        G = np.zeros((len(X), len(order), len(states)))
        for p in self.policies:
            u, g, _ = p.evaluate(X[:, list(p.states)])
            rows = [row[i] for i in p.inputs]
            cols = [col[s] for s in p.states]
            U[:, rows] = u
            G[:, np.array(rows)[:, None], np.array(cols)[None, :]] = g
        return U, G

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        U = np.zeros((len(X), self.sys.m))
        for p in self.policies:
            U[:, list(p.inputs)] = p(X[:, list(p.states)])
        return U


def nn_policy(bundle: TrajectoryBundle, x, sys: ControlSystem) -> np.ndarray:
    pol = NNPolicy(bundle, [s in sys.periodic_axes for s in bundle.states],
                   sys.input_lower[list(bundle.inputs)], sys.input_upper[list(bundle.inputs)])
    out = pol(np.atleast_2d(x))
    return out if np.ndim(x) > 1 else out[0]


# --------------------------------------------------------------------------
# Node problem
# --------------------------------------------------------------------------


class DDPProblem:
    """Dynamics and discounted cost of one node, with inner policies embedded."""

    def __init__(self, sys: ControlSystem, states, inputs, inner: NNComposed | None = None):
        self.sys = sys
        self.states = list(states)
        self.inputs = list(inputs)
        self.inner = inner
        self.desc = inner.input_indices if inner is not None else []
        self.nx, self.nu, self.nd = len(self.states), len(self.inputs), len(self.desc)
        self.lower = sys.input_lower[self.inputs]
        self.upper = sys.input_upper[self.inputs]
        self.periodic = np.array([s in sys.periodic_axes for s in self.states])
        self.Q = sys.Q[np.ix_(self.states, self.states)]
        cost_in = self.inputs + self.desc
        self.Rc = sys.R[np.ix_(cost_in, cost_in)]
        self.uc_goal = sys.goal_input[cost_in]
        self.x_goal = sys.goal_state[self.states]
        self.u_goal = sys.goal_input[self.inputs]

    def _full(self, x, u, ud):
        B = len(x)
        X = np.broadcast_to(self.sys.goal_state, (B, self.sys.n)).copy()
        X[:, self.states] = x
        U = np.zeros((B, self.sys.m))
        U[:, self.inputs] = u
        if self.nd:
            U[:, self.desc] = ud
        return X, U

    def step(self, x, u, ud, dt):
        f = self.sys.dynamics

        def fi(xs, us):
            X, U = self._full(xs, us[:, :self.nu], us[:, self.nu:])
            return f(X, U)[:, self.states]

        return rk4_step(fi, x, np.concatenate([u, ud], axis=1), dt)

    def inner_inputs(self, x):
        if self.inner is None:
            return np.zeros((len(x), 0)), np.zeros((len(x), 0, self.nx))
        X, _ = self._full(x, np.zeros((len(x), self.nu)), None)
        return self.inner.evaluate(X, self.states)

    def stage_cost(self, x, u, ud):
        dx = _wrapped_diff(x - self.x_goal, self.periodic)
        du = np.concatenate([u, ud], axis=-1) - self.uc_goal
        return (np.einsum("...i,ij,...j->...", dx, self.Q, dx)
                + np.einsum("...i,ij,...j->...", du, self.Rc, du))


def _discount(sys, N, dt):
    return np.exp(-sys.lam * dt * np.arange(N)) * dt


def forward(problem: DDPProblem, x0, N, dt, policy):
    """Roll out ``policy(k, x) -> u`` (batched) from ``x0``; returns X, U, Ud, G, cost."""
    B = len(x0)
    X = np.empty((B, N + 1, problem.nx))
    U = np.empty((B, N, problem.nu))
    Ud = np.empty((B, N, problem.nd))
    G = np.empty((B, N, problem.nd, problem.nx))
    w = _discount(problem.sys, N, dt)
    cost = np.zeros(B)
    x = np.asarray(x0, dtype=float).copy()
    X[:, 0] = x
    for k in range(N):
        u = policy(k, x)
        ud, g = problem.inner_inputs(x)
        U[:, k], Ud[:, k], G[:, k] = u, ud, g
        cost += w[k] * problem.stage_cost(x, u, ud)
        x = problem.step(x, u, ud, dt)
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"non-finite state in DDP forward pass at t={(k + 1) * dt:.6g}")
        X[:, k + 1] = x
    return X, U, Ud, G, cost


def linearize_steps(problem: DDPProblem, X, U, Ud, dt):
    """Central-difference step Jacobians at every knot: A (B,N,nx,nx), B (B,N,nx,nu).

    Inner inputs are treated as functions of the state through ``G``; that
    chain term is added by the caller.
    """
    Bt, N, nx = X.shape[0], U.shape[1], problem.nx
    nu, nd = problem.nu, problem.nd
    x = X[:, :-1].reshape(-1, nx)
    u = U.reshape(-1, nu)
    ud = Ud.reshape(len(x), nd)
    z = np.concatenate([x, u, ud], axis=1)
    h = fd_steps(z)
    J = np.empty((len(z), nx, nx + nu + nd))
    for j in range(z.shape[1]):
        zp, zm = z.copy(), z.copy()
        zp[:, j] += h[:, j]
        zm[:, j] -= h[:, j]
        fp = problem.step(zp[:, :nx], zp[:, nx:nx + nu], zp[:, nx + nu:], dt)
        fm = problem.step(zm[:, :nx], zm[:, nx:nx + nu], zm[:, nx + nu:], dt)
        J[:, :, j] = (fp - fm) / (2.0 * h[:, j:j + 1])
    J = J.reshape(Bt, N, nx, nx + nu + nd)
    return J[..., :nx], J[..., nx:nx + nu], J[..., nx + nu:]


@numba.njit(cache=True)
def _chol_solve(M, rhs):
    """Cholesky solve; returns (ok, solution)."""
    n = M.shape[0]
    L = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1):
            s = M[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if i == j:
                if s <= 0.0:
                    return False, rhs
                L[i, i] = np.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
    out = rhs.copy()
    for c in range(rhs.shape[1]):
        for i in range(n):
            s = out[i, c]
            for k in range(i):
                s -= L[i, k] * out[k, c]
            out[i, c] = s / L[i, i]
        for i in range(n - 1, -1, -1):
            s = out[i, c]
            for k in range(i + 1, n):
                s -= L[k, i] * out[k, c]
            out[i, c] = s / L[i, i]
    return True, out


@numba.njit(cache=True)
def _clamp_step(Quu, Qu, Qux, kk, KK, u, lo, hi):
    """Clamp the step to the box and re-solve the free components.

    Components pushed past a bound are fixed there with zero feedback; the
    remaining ones are re-optimised given the fixed ones. Repeats until no
    further component leaves the box.
    """
    nu = kk.shape[0]
    nx = KK.shape[1]
    clamped = np.zeros(nu, dtype=np.bool_)
    for _ in range(nu + 1):
        changed = False
        for i in range(nu):
            if not clamped[i]:
                target = u[i] + kk[i]
                if target <= lo[i] or target >= hi[i]:
                    clamped[i] = True
                    changed = True
        if not changed:
            break
        free = np.flatnonzero(~clamped)
        for i in range(nu):
            if clamped[i]:
                kk[i] = min(max(u[i] + kk[i], lo[i]), hi[i]) - u[i]
                KK[i, :] = 0.0
        nf = free.shape[0]
        if nf == 0:
            break
        Mff = np.empty((nf, nf))
        rhs = np.empty((nf, nx + 1))
        for a in range(nf):
            for c in range(nf):
                Mff[a, c] = Quu[free[a], free[c]]
            g = Qu[free[a]]
            for i in range(nu):
                if clamped[i]:
                    g += Quu[free[a], i] * kk[i]
            rhs[a, 0] = g
            for j in range(nx):
                rhs[a, 1 + j] = Qux[free[a], j]
        good, sol = _chol_solve(Mff, rhs)
        for a in range(nf):
            kk[free[a]] = -sol[a, 0]
            for j in range(nx):
                KK[free[a], j] = -sol[a, 1 + j]
    return kk, KK


@numba.njit(cache=True)
def _backward(A, Bm, lx, lu, lxx, luu, lux, U, lo, hi, mu):
    Bt, N, nx, nu = Bm.shape
    k_ff = np.zeros((Bt, N, nu))
    K_fb = np.zeros((Bt, N, nu, nx))
    dV = np.zeros((Bt, 2))
    ok = np.ones(Bt, dtype=np.bool_)
    for b in range(Bt):
        Vx = np.zeros(nx)
        Vxx = np.zeros((nx, nx))
        for t in range(N - 1, -1, -1):
            At = np.ascontiguousarray(A[b, t])
            Bt_ = np.ascontiguousarray(Bm[b, t])
            Qx = lx[b, t] + At.T @ Vx
            Qu = lu[b, t] + Bt_.T @ Vx
            Qxx = lxx[b, t] + At.T @ Vxx @ At
            Quu = luu[b, t] + Bt_.T @ Vxx @ Bt_
            Qux = lux[b, t] + Bt_.T @ Vxx @ At
            Qreg = Quu + mu[b] * np.eye(nu)
            rhs = np.empty((nu, nx + 1))
            rhs[:, 0] = Qu
            rhs[:, 1:] = Qux
            good, sol = _chol_solve(Qreg, rhs)
            if not good:
                ok[b] = False
                break
            kk = -sol[:, 0]
            KK = -sol[:, 1:]
            kk, KK = _clamp_step(Qreg, Qu, Qux, kk, KK, U[b, t], lo, hi)
            Vx = Qx + KK.T @ Quu @ kk + KK.T @ Qu + Qux.T @ kk
            Vxx = Qxx + KK.T @ Quu @ KK + KK.T @ Qux + Qux.T @ KK
            Vxx = 0.5 * (Vxx + Vxx.T)
            dV[b, 0] += kk @ Qu
            dV[b, 1] += 0.5 * kk @ Quu @ kk
            k_ff[b, t] = kk
            K_fb[b, t] = KK
    return k_ff, K_fb, dV, ok


def _cost_derivatives(problem: DDPProblem, X, U, Ud, G, w):
    """Exact quadratic expansion of the weighted stage cost, inner inputs via G."""
    x = X[:, :-1]
    dx = _wrapped_diff(x - problem.x_goal, problem.periodic)
    duc = np.concatenate([U, Ud], axis=-1) - problem.uc_goal
    nu = problem.nu
    Bt, N = U.shape[:2]
    # d(cost inputs)/dx and d(cost inputs)/du
    Gc = np.concatenate([np.zeros((Bt, N, nu, problem.nx)), G], axis=2)
    Hc = np.zeros((problem.nu + problem.nd, nu))
    Hc[:nu, :nu] = np.eye(nu)
    R = problem.Rc
    wr = w[None, :, None]
    Rduc = duc @ R
    lx = 2 * wr * (dx @ problem.Q + np.einsum("btci,btc->bti", Gc, Rduc))
    lu = 2 * wr * (Rduc @ Hc)
    RG = np.einsum("cd,btdi->btci", R, Gc)
    ww = w[None, :, None, None]
    lxx = 2 * ww * (problem.Q + np.einsum("btci,btcj->btij", Gc, RG))
    luu = np.broadcast_to(2 * ww * (Hc.T @ R @ Hc), (Bt, N, nu, nu)).copy()
    lux = 2 * ww * np.einsum("ca,btci->btai", Hc, RG)
    return lx, lu, lxx, luu, lux


@dataclass
class _State:
    X: np.ndarray
    U: np.ndarray
    Ud: np.ndarray
    G: np.ndarray
    cost: np.ndarray


def ddp_solve_batch(problem: DDPProblem, x0, U0, dt: float, cfg: DDPConfig = DDPConfig(),
                    check_monotone: bool = True) -> list[Trajectory]:
    """Run DDP from every row of ``x0`` with initial open-loop inputs ``U0`` (B, N, nu).

    Starts are solved together but each has its own regularisation, step
    size and convergence status. A start that cannot improve at maximum
    regularisation is returned unconverged (flagged).
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    U0 = np.clip(np.asarray(U0, dtype=float), problem.lower, problem.upper)
    Bn, N = U0.shape[:2]
    w = _discount(problem.sys, N, dt)
    X, U, Ud, G, cost = forward(problem, x0, N, dt, lambda k, x: U0[:, k])
    st = _State(X, U, Ud, G, cost)
    mu = np.full(Bn, cfg.mu_init)
    K_last = np.zeros((Bn, N, problem.nu, problem.nx))
    done = np.zeros(Bn, dtype=bool)
    converged = np.zeros(Bn, dtype=bool)
    iters = np.zeros(Bn, dtype=int)
    history = [[float(c)] for c in cost]
    for _ in range(cfg.max_iter):
        act = np.flatnonzero(~done)
        if act.size == 0:
            break
        A, Bu, Bd = linearize_steps(problem, st.X[act], st.U[act], st.Ud[act], dt)
        if problem.nd:
            A = A + np.einsum("btid,btdj->btij", Bd, st.G[act])
        lx, lu, lxx, luu, lux = _cost_derivatives(problem, st.X[act], st.U[act], st.Ud[act], st.G[act], w)
        pending = act.copy()
        while pending.size:
            sel = np.searchsorted(act, pending)
            kf, Kf, dV, ok = _backward(A[sel], Bu[sel], lx[sel], lu[sel], lxx[sel], luu[sel], lux[sel],
                                       st.U[pending], problem.lower, problem.upper, mu[pending])
            # forward line search over all step sizes at once
            good = pending[ok]
            if good.size:
                gsel = np.flatnonzero(ok)
                na = len(ALPHAS)
                rep = np.repeat(np.arange(good.size), na)
                alpha = np.tile(ALPHAS, good.size)
                Xn = st.X[good][rep]
                Un = st.U[good][rep]
                kr = kf[gsel][rep]
                Kr = Kf[gsel][rep]

                def pol(k, x, Xn=Xn, Un=Un, kr=kr, Kr=Kr, alpha=alpha):
                    dev = _wrapped_diff(x - Xn[:, k], problem.periodic)
                    u = Un[:, k] + alpha[:, None] * kr[:, k] + np.einsum("bij,bj->bi", Kr[:, k], dev)
                    return np.clip(u, problem.lower, problem.upper)

                Xc, Uc, Udc, Gc, cc = forward(problem, st.X[good][:, 0][rep], N, dt, pol)
                cc = cc.reshape(good.size, na)
                old = st.cost[good]
                expected = -(ALPHAS[None, :] * dV[gsel, 0:1] + ALPHAS[None, :] ** 2 * dV[gsel, 1:2])
                gain = old[:, None] - cc
                accept = (gain > 0) & ((expected <= 0) | (gain >= 1e-4 * expected))
                for r, b in enumerate(good):
                    iters[b] += 1
                    if accept[r].any():
                        a = int(np.argmax(accept[r]))
                        row = r * na + a
                        rel = gain[r, a] / max(old[r], 1e-300)
                        if check_monotone and cc[r, a] > old[r] * (1 + 1e-12):
                            raise AssertionError("accepted DDP step increased the cost")
                        st.X[b], st.U[b], st.Ud[b], st.G[b] = Xc[row], Uc[row], Udc[row], Gc[row]
                        st.cost[b] = cc[r, a]
                        K_last[b] = Kf[gsel[r]]
                        history[b].append(float(cc[r, a]))
                        mu[b] = max(mu[b] / 10.0, cfg.mu_min)
                        predicted = -dV[gsel[r]].sum()
                        if rel < cfg.tol and (a == 0 or predicted <= cfg.tol * old[r]):
                            done[b] = converged[b] = True
                    else:
                        predicted = -dV[gsel[r]].sum()
                        if 0.0 <= predicted <= cfg.tol * max(old[r], 1e-300):
                            # no predicted improvement left
                            K_last[b] = Kf[gsel[r]]
                            done[b] = converged[b] = True
                        else:
                            mu[b] = max(mu[b] * 10.0, cfg.mu_min)
                            if mu[b] > cfg.mu_max:
                                done[b] = True
            bad = pending[~ok]
            for b in bad:
                mu[b] = max(mu[b] * 10.0, cfg.mu_min)
                if mu[b] > cfg.mu_max:
                    done[b] = True
            pending = bad[mu[bad] <= cfg.mu_max]
    # final unregularised feedback pass around the accepted trajectories (Xref = X)
    A, Bu, Bd = linearize_steps(problem, st.X, st.U, st.Ud, dt)
    if problem.nd:
        A = A + np.einsum("btid,btdj->btij", Bd, st.G)
    lx, lu, lxx, luu, lux = _cost_derivatives(problem, st.X, st.U, st.Ud, st.G, w)
    _, Kf, _, ok = _backward(A, Bu, lx, lu, lxx, luu, lux, st.U, problem.lower, problem.upper,
                             np.zeros(Bn))
    K_last[ok] = Kf[ok]
    times = dt * np.arange(N + 1)
    out = []
    for b in range(Bn):
        X = st.X[b].copy()
        out.append(Trajectory(dt, times, X, X.copy(), st.U[b].copy(), -K_last[b], float(st.cost[b]),
                              int(iters[b]), bool(converged[b]), tuple(history[b])))
    return out


def ddp_solve(problem: DDPProblem, x0, U0, T: float, dt: float, cfg: DDPConfig = DDPConfig()) -> Trajectory:
    """Single-start DDP; raises :class:`DDPStall` when no step can be accepted."""
    U0 = np.asarray(U0, dtype=float)
    N = int(round(T / dt))
    if U0.shape[0] != N:
        raise ValueError(f"U0 must have {N} rows for T={T}, dt={dt}")
    traj = ddp_solve_batch(problem, np.atleast_2d(x0), U0[None], dt, cfg)[0]
    if not traj.converged and traj.iterations < cfg.max_iter:
        raise DDPStall("DDP stalled at maximum regularisation", traj)
    return traj


# --------------------------------------------------------------------------
# Bundles and err_ddp
# --------------------------------------------------------------------------


def corner_states(sys: ControlSystem) -> np.ndarray:
    return box_corners(sys.S_eval)


def _node_index_sets(sys, node: SubPolicyNode):
    return (sys.state_group_indices(node.effective_states()), sys.input_group_indices(node.inputs))


def build_bundles(sys: ControlSystem, d: Decomposition, cfg: DDPConfig = DDPConfig()) -> dict:
    """DDP bundles for every node of ``d``, innermost first, keyed by node path.

    Start states are the distinct restrictions of the S_eval corners to the
    node's states. Initial inputs come from the node's LQR gain (zero gain
    if its subsystem is unstabilisable) with inner nearest-neighbour policies
    active.
    """
    T, dt = cfg.horizon_for(sys), cfg.dt
    N = int(round(T / dt))
    try:
        gains = decomposition_gains(sys, d)
    except Unstabilizable:
        gains = {}
    corners = corner_states(sys)
    built: dict[tuple, TrajectoryBundle] = {}
    policies: dict[tuple, NNPolicy] = {}
    for path, node in d.nodes():
        states, inputs = _node_index_sets(sys, node)
        inner_paths = [p for p in built if len(p) > len(path) and p[:len(path)] == path]
        inner = NNComposed(sys, [policies[p] for p in sorted(inner_paths)]) if inner_paths else None
        problem = DDPProblem(sys, states, inputs, inner)
        sub = corners[:, states]
        starts, first, cidx = np.unique(sub, axis=0, return_index=True, return_inverse=True)
        order = np.argsort(first)
        rank = np.empty_like(order)
        rank[order] = np.arange(len(order))
        starts = starts[order]
        cidx = rank[np.asarray(cidx).ravel()]
        K = gains.get(node, np.zeros((len(inputs), len(states))))

        def lqr_pol(k, x, K=K, problem=problem):
            dev = _wrapped_diff(x - problem.x_goal, problem.periodic)
            return np.clip(problem.u_goal - dev @ K.T, problem.lower, problem.upper)

        _, U0, _, _, _ = forward(problem, starts, N, dt, lqr_pol)
        trajs = ddp_solve_batch(problem, starts, U0, dt, cfg)
        bundle = TrajectoryBundle(path, tuple(states), tuple(inputs), starts, tuple(trajs), cidx)
        built[path] = bundle
        policies[path] = NNPolicy(bundle, problem.periodic, problem.lower, problem.upper)
    return built


def composed_nn(sys: ControlSystem, bundles: dict) -> NNComposed:
    pols = []
    for path in sorted(bundles, key=lambda p: (-len(p), p)):
        b = bundles[path]
        pols.append(NNPolicy(b, [s in sys.periodic_axes for s in b.states],
                             sys.input_lower[list(b.inputs)], sys.input_upper[list(b.inputs)]))
    return NNComposed(sys, pols)


@dataclass(frozen=True, eq=False)
class DDPEstimate:
    err: float
    V_opt: np.ndarray
    V_dec: np.ndarray
    flagged: tuple[int, ...]
    stalled: tuple[tuple, ...] = ()


def full_values(sys: ControlSystem, full_bundle: TrajectoryBundle) -> np.ndarray:
    """V*_ddp at each S_eval corner from the undecomposed bundle."""
    costs = np.array([t.cost for t in full_bundle.trajectories])
    return costs[full_bundle.corner_index]


def err_ddp(sys: ControlSystem, d: Decomposition, cfg: DDPConfig = DDPConfig(),
            full_bundle: TrajectoryBundle | None = None, bundles: dict | None = None) -> DDPEstimate:
    """Mean over S_eval corners of the decomposed rollout cost minus V*_ddp."""
    if full_bundle is None:
        full_bundle = build_bundles(sys, Decomposition.full(sys), cfg)[(0,)]
    V_opt = full_values(sys, full_bundle)
    if d.is_full:
        return DDPEstimate(0.0, V_opt, V_opt.copy(), full_bundle.flagged and tuple(
            int(c) for c in np.flatnonzero(np.isin(full_bundle.corner_index, full_bundle.flagged))))
    bundles = build_bundles(sys, d, cfg) if bundles is None else bundles
    policy = composed_nn(sys, bundles)
    ceiling = cfg.ceiling_factor * np.maximum(V_opt, 1e-12)
    ro = rollout_batch(sys, policy, corner_states(sys), cfg.horizon_for(sys), cfg.dt,
                       cost_ceiling=ceiling)
    over = ro.terminated_early | (ro.discounted_cost > ceiling)
    V_dec = np.where(over, ceiling, ro.discounted_cost)
    stalled = tuple(p for p, b in bundles.items() if b.flagged)
    return DDPEstimate(float(np.mean(V_dec - V_opt)), V_opt, V_dec,
                       tuple(int(i) for i in np.flatnonzero(over)), stalled)


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------


def save_bundle(path: str | Path, sys: ControlSystem, bundle: TrajectoryBundle) -> Path:
    """Per-knot table ``[X, Xref, U, K]`` (U and K padded at the final knot)."""
    path = Path(path)
    k = bundle.k
    N = len(bundle.trajectories[0].U)
    nx, nu = len(bundle.states), len(bundle.inputs)
    cols = 2 * nx + nu + nu * nx
    table = np.zeros((k, N + 1, cols))
    for s, t in enumerate(bundle.trajectories):
        table[s, :, :nx] = t.X
        table[s, :, nx:2 * nx] = t.Xref
        table[s, :N, 2 * nx:2 * nx + nu] = t.U
        table[s, :N, 2 * nx + nu:] = t.K.reshape(N, -1)
    spec = GridSpec([0.0, 0.0], [max(k - 1, 1), N * t.dt], (max(k, 2), N + 1), (False, False))
    if k == 1:
        table = np.concatenate([table, table])
    side = {"system": system_to_dict(sys), "path": list(bundle.path), "states": list(bundle.states),
            "inputs": list(bundle.inputs), "dt": t.dt, "k": k,
            "starts": bundle.starts.tolist(), "corner_index": [int(c) for c in bundle.corner_index],
            "costs": [t.cost for t in bundle.trajectories],
            "converged": [t.converged for t in bundle.trajectories],
            "iterations": [t.iterations for t in bundle.trajectories]}
    return write_grid(path, spec, table, side)


def load_bundle(path: str | Path) -> TrajectoryBundle:
    path = Path(path)
    side = json.loads(path.with_suffix(path.suffix + ".json").read_text(encoding="utf-8"))
    _, table = read_grid(path)
    k, nx, nu = side["k"], len(side["states"]), len(side["inputs"])
    table = table[:k]
    dt = side["dt"]
    N = table.shape[1] - 1
    trajs = []
    for s in range(k):
        row = table[s]
        trajs.append(Trajectory(dt, dt * np.arange(N + 1), row[:, :nx].copy(), row[:, nx:2 * nx].copy(),
                                row[:N, 2 * nx:2 * nx + nu].copy(),
                                row[:N, 2 * nx + nu:].reshape(N, nu, nx).copy(),
                                side["costs"][s], side["iterations"][s], side["converged"][s]))
    return TrajectoryBundle(tuple(side["path"]), tuple(side["states"]), tuple(side["inputs"]),
                            np.array(side["starts"]), tuple(trajs), np.array(side["corner_index"]))
