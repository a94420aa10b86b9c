"""Grid-based policy iteration, composed sub-policies and the true value error.

Values and policies live on regular grids over a node's effective state axes
(the restriction of the system grid to those axes). Backups use the Euler
transcription ``x' = x + f(x, u) dt`` with discount ``exp(-lam dt)`` and
multilinear interpolation; periodic axes wrap, the others clamp to the box.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .decomp import Decomposition, SubPolicyNode
from .systems import ControlSystem, NumericalError, system_to_dict

MAGIC = b"PDGRID01"


class ConvergenceError(NumericalError):
    def __init__(self, message: str, residual: float, path: tuple = ()):
        super().__init__(message)
        self.residual = residual
        self.path = path


# --------------------------------------------------------------------------
# Grid geometry and interpolation kernels
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GridSpec:
    lo: np.ndarray
    hi: np.ndarray
    shape: tuple[int, ...]
    periodic: tuple[bool, ...]

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float))
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "periodic", tuple(bool(p) for p in self.periodic))
        if any(s < 2 for s in self.shape):
            raise ValueError("every grid axis needs at least two points")

    @classmethod
    def for_axes(cls, sys: ControlSystem, axes) -> "GridSpec":
        axes = list(axes)
        return cls(sys.S_full[axes, 0], sys.S_full[axes, 1],
                   tuple(sys.grid_shape[i] for i in axes),
                   tuple(i in sys.periodic_axes for i in axes))

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def step(self) -> np.ndarray:
        return (self.hi - self.lo) / (np.array(self.shape) - 1)

    @property
    def axes(self) -> list[np.ndarray]:
        return [np.linspace(l, h, s) for l, h, s in zip(self.lo, self.hi, self.shape)]

    def points(self) -> np.ndarray:
        """All grid vertices, row-major (last axis fastest), shape (size, ndim)."""
        if self.ndim == 0:
            return np.zeros((1, 0))
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=-1)

    def _args(self):
        return (self.lo, self.step, np.array(self.shape, dtype=np.int64),
                np.array(self.periodic, dtype=np.bool_))

    def locate(self, pts) -> tuple[np.ndarray, np.ndarray]:
        pts = np.ascontiguousarray(pts, dtype=float)
        return _locate(pts, *self._args())

    def interpolate(self, table: np.ndarray, pts) -> np.ndarray:
        """Multilinear interpolation of ``table`` (size, k) at ``pts`` (P, ndim)."""
        pts = np.ascontiguousarray(pts, dtype=float)
        return _interp(pts, np.ascontiguousarray(table, dtype=float), *self._args())


@numba.njit(cache=True)
def _cell(c, lo, step, n, periodic):
    s = (c - lo) / step
    # snap round-off so that vertices reproduce stored values exactly
    r = np.floor(s + 0.5)
    if abs(s - r) <= 1e-9:
        s = r
    if periodic:
        s = s % (n - 1)
    else:
        if s < 0.0:
            s = 0.0
        elif s > n - 1:
            s = n - 1.0
    i = int(np.floor(s))
    if i > n - 2:
        i = n - 2
    return i, s - i


@numba.njit(cache=True)
def _locate(pts, lo, step, shape, periodic):
    P, d = pts.shape
    nc = 1 << d
    idx = np.empty((P, nc), dtype=np.int64)
    w = np.empty((P, nc))
    base = np.empty(d, dtype=np.int64)
    frac = np.empty(d)
    strides = np.empty(d, dtype=np.int64)
    acc = 1
    for j in range(d - 1, -1, -1):
        strides[j] = acc
        acc *= shape[j]
    for p in range(P):
        for j in range(d):
            base[j], frac[j] = _cell(pts[p, j], lo[j], step[j], shape[j], periodic[j])
        for c in range(nc):
            flat = 0
            wt = 1.0
            for j in range(d):
                if (c >> (d - 1 - j)) & 1:
                    flat += (base[j] + 1) * strides[j]
                    wt *= frac[j]
                else:
                    flat += base[j] * strides[j]
                    wt *= 1.0 - frac[j]
            idx[p, c] = flat
            w[p, c] = wt
    return idx, w


@numba.njit(cache=True)
def _interp(pts, table, lo, step, shape, periodic):
    P, d = pts.shape
    k = table.shape[1]
    out = np.zeros((P, k))
    base = np.empty(d, dtype=np.int64)
    frac = np.empty(d)
    strides = np.empty(d, dtype=np.int64)
    acc = 1
    for j in range(d - 1, -1, -1):
        strides[j] = acc
        acc *= shape[j]
    for p in range(P):
        for j in range(d):
            base[j], frac[j] = _cell(pts[p, j], lo[j], step[j], shape[j], periodic[j])
        for c in range(1 << d):
            flat = 0
            wt = 1.0
            for j in range(d):
                if (c >> (d - 1 - j)) & 1:
                    flat += (base[j] + 1) * strides[j]
                    wt *= frac[j]
                else:
                    flat += base[j] * strides[j]
                    wt *= 1.0 - frac[j]
            if wt != 0.0:
                for q in range(k):
                    out[p, q] += wt * table[flat, q]
    return out


@numba.njit(cache=True)
def _sweeps(cost, idx, w, V, gamma, rtol, max_sweeps):
    """Jacobi fixed-policy evaluation; returns (V, sweeps, last residual)."""
    P, nc = idx.shape
    cur = V.copy()
    nxt = np.empty_like(cur)
    res = np.inf
    it = 0
    while it < max_sweeps:
        res = 0.0
        vmax = 0.0
        for p in range(P):
            acc = 0.0
            for c in range(nc):
                acc += w[p, c] * cur[idx[p, c]]
            v = cost[p] + gamma * acc
            nxt[p] = v
            diff = abs(v - cur[p])
            if diff > res:
                res = diff
            if abs(v) > vmax:
                vmax = abs(v)
        cur, nxt = nxt, cur
        it += 1
        if res < rtol * (1.0 + vmax):
            break
    return cur, it, res


# --------------------------------------------------------------------------
# Value/policy grids and persistence
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ValueGrid:
    spec: GridSpec
    values: np.ndarray  # grid shape

    @property
    def axes(self):
        return self.spec.axes

    def __call__(self, pts) -> np.ndarray:
        return self.spec.interpolate(self.values.reshape(-1, 1), np.atleast_2d(pts))[:, 0]


@dataclass(frozen=True, eq=False)
class PolicyGrid:
    spec: GridSpec
    controls: np.ndarray  # grid shape + (k,)
    lower: np.ndarray
    upper: np.ndarray

    def __call__(self, pts) -> np.ndarray:
        k = self.controls.shape[-1]
        u = self.spec.interpolate(self.controls.reshape(-1, k), np.atleast_2d(pts))
        return np.clip(u, self.lower, self.upper)


def write_grid(path: str | Path, spec: GridSpec, data: np.ndarray, sidecar: dict | None = None) -> Path:
    """Binary container: magic, ndim, ncomp, lengths, periodic flags, lo, hi, payload."""
    path = Path(path)
    data = np.asarray(data, dtype="<f8")
    ncomp = int(data.size // spec.size)
    head = MAGIC + struct.pack("<II", spec.ndim, ncomp)
    head += struct.pack(f"<{spec.ndim}Q", *spec.shape)
    head += struct.pack(f"<{spec.ndim}B", *spec.periodic)
    head += spec.lo.astype("<f8").tobytes() + spec.hi.astype("<f8").tobytes()
    path.write_bytes(head + np.ascontiguousarray(data).tobytes())
    if sidecar is not None:
        path.with_suffix(path.suffix + ".json").write_text(
            json.dumps(sidecar, indent=2, sort_keys=True), encoding="utf-8")
    return path


def read_grid(path: str | Path) -> tuple[GridSpec, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a PDGRID01 container")
    d, ncomp = struct.unpack_from("<II", raw, 8)
    off = 16
    shape = struct.unpack_from(f"<{d}Q", raw, off)
    off += 8 * d
    periodic = struct.unpack_from(f"<{d}B", raw, off)
    off += d
    lo = np.frombuffer(raw, "<f8", d, off)
    hi = np.frombuffer(raw, "<f8", d, off + 8 * d)
    off += 16 * d
    data = np.frombuffer(raw, "<f8", offset=off).copy()
    spec = GridSpec(lo, hi, shape, tuple(bool(p) for p in periodic))
    if ncomp > 1:
        return spec, data.reshape(*shape, ncomp)
    return spec, data.reshape(shape)


# --------------------------------------------------------------------------
# Node problems
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GridConfig:
    action_samples: int = 9
    max_iterations: int = 100
    max_sweeps: int = 2000
    tol: float = 1e-6
    dt: float | None = None
    cfl: float = 0.1
    dt_bounds: tuple[float, float] = (1e-3, 2e-2)


def action_set(lower, upper, samples: int) -> np.ndarray:
    """Product grid of ``samples`` evenly spaced values per input component."""
    axes = [np.linspace(l, h, samples) for l, h in zip(lower, upper)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=-1)


def backup_dt(sys: ControlSystem, cfg: GridConfig = GridConfig()) -> float:
    """CFL-style step: ``cfl * min(cell width / max|f|)`` clamped to ``dt_bounds``."""
    if cfg.dt is not None:
        return float(cfg.dt)
    spec = GridSpec.for_axes(sys, range(sys.n))
    pts = spec.points()
    corners = action_set(sys.input_lower, sys.input_upper, 2)
    fmax = np.zeros(sys.n)
    for u in np.vstack([corners, sys.goal_input[None]]):
        f = sys.dynamics(pts, np.broadcast_to(u, (len(pts), sys.m)))
        fmax = np.maximum(fmax, np.nanmax(np.abs(f), axis=0))
    with np.errstate(divide="ignore"):
        ratio = np.where(fmax > 0, spec.step / fmax, np.inf)
    lo, hi = cfg.dt_bounds
    return float(np.clip(cfg.cfl * ratio.min(), lo, hi))


class NodeProblem:
    """Discrete-time MDP for one sub-policy on the restriction of the system grid.

    Complement states are frozen at the goal; complement inputs are zero
    except those produced by the node's descendants (``inner``), which are
    interpolated once at every vertex. The cost weighs the node's states, its
    own inputs and the descendants' inputs.
    """

    def __init__(self, sys: ControlSystem, states, inputs, inner: "ComposedPolicy | None",
                 dt: float, samples: int = 9):
        self.sys = sys
        self.states = list(states)
        self.inputs = list(inputs)
        self.spec = GridSpec.for_axes(sys, self.states)
        self.cells = self.spec.points()
        self.dt = dt
        self.gamma = float(np.exp(-sys.lam * dt))
        self.actions = action_set(sys.input_lower[self.inputs], sys.input_upper[self.inputs], samples)
        P = len(self.cells)
        X = np.broadcast_to(sys.goal_state, (P, sys.n)).copy()
        X[:, self.states] = self.cells
        self.X = X
        U = np.zeros((P, sys.m))
        cost_inputs = list(self.inputs)
        if inner is not None:
            U += inner(X)
            cost_inputs += list(inner.input_indices)
        self.U = U
        ci = sorted(cost_inputs)
        self.cost_inputs = ci
        dx = sys.state_difference(X)[:, self.states]
        Q = sys.Q[np.ix_(self.states, self.states)]
        self.state_cost = np.einsum("pi,ij,pj->p", dx, Q, dx)
        self.R = sys.R[np.ix_(ci, ci)]

    def transition(self, u_node: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Successor cells and stage cost ``c dt`` for per-cell node inputs."""
        U = self.U.copy()
        U[:, self.inputs] = u_node
        f = self.sys.dynamics(self.X, U)
        nxt = self.cells + self.dt * f[:, self.states]
        du = U[:, self.cost_inputs] - self.sys.goal_input[self.cost_inputs]
        c = self.state_cost + np.einsum("pi,ij,pj->p", du, self.R, du)
        if not np.all(np.isfinite(nxt)):
            raise NumericalError("non-finite successor state in grid backup")
        return nxt, c * self.dt

    def q_values(self, V_flat: np.ndarray, u_node: np.ndarray) -> np.ndarray:
        nxt, c = self.transition(u_node)
        return c + self.gamma * self.spec.interpolate(V_flat[:, None], nxt)[:, 0]

    def evaluate(self, u_node, V0, tol, max_sweeps):
        nxt, c = self.transition(u_node)
        idx, w = self.spec.locate(nxt)
        return _sweeps(c, idx, w, V0, self.gamma, tol, max_sweeps)


@dataclass
class PIStats:
    iterations: int = 0
    sweeps: list = field(default_factory=list)
    residual: float = 0.0
    seconds: float = 0.0
    record: bool = False
    history: list = field(default_factory=list)


def policy_iteration(problem: NodeProblem, cfg: GridConfig = GridConfig(),
                     stats: PIStats | None = None) -> tuple[ValueGrid, PolicyGrid]:
    """Alternate fixed-policy evaluation and greedy improvement until stable."""
    stats = PIStats() if stats is None else stats
    t0 = time.perf_counter()
    sys = problem.sys
    A = problem.actions
    ud = sys.goal_input[problem.inputs]
    pol = np.full(len(problem.cells), int(np.argmin(np.linalg.norm(A - ud, axis=1))))
    V = np.zeros(len(problem.cells))
    converged = False
    res = np.inf
    for it in range(cfg.max_iterations):
        V, n_sw, res = problem.evaluate(A[pol], V, cfg.tol, cfg.max_sweeps)
        stats.sweeps.append(int(n_sw))
        if stats.record:
            stats.history.append(V.copy())
        best = problem.q_values(V, A[pol])
        new = pol.copy()
        margin = 1e-9 * (1.0 + np.abs(best))
        for a in range(len(A)):
            q = problem.q_values(V, np.broadcast_to(A[a], (len(pol), A.shape[1])))
            better = q < best - margin
            new[better] = a
            best = np.where(better, q, best)
        stats.iterations = it + 1
        if np.array_equal(new, pol):
            converged = True
            break
        pol = new
    stats.residual = float(res)
    stats.seconds = time.perf_counter() - t0
    if not converged:
        raise ConvergenceError(f"policy iteration did not settle in {cfg.max_iterations} improvements",
                               float(res))
    shape = problem.spec.shape
    vg = ValueGrid(problem.spec, V.reshape(shape))
    pg = PolicyGrid(problem.spec, A[pol].reshape(*shape, A.shape[1]),
                    sys.input_lower[problem.inputs], sys.input_upper[problem.inputs])
    return vg, pg


# --------------------------------------------------------------------------
# Composition
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class NodePolicy:
    path: tuple[int, ...]
    node: SubPolicyNode
    states: tuple[int, ...]
    inputs: tuple[int, ...]
    policy: PolicyGrid
    value: ValueGrid | None = None


@dataclass(frozen=True, eq=False)
class ComposedPolicy:
    """Sub-policies in innermost-first order; maps full states to inputs."""

    decomposition: Decomposition | None
    nodes: tuple[NodePolicy, ...]
    m: int
    solve_seconds: float = 0.0

    @property
    def input_indices(self) -> tuple[int, ...]:
        return tuple(sorted(i for n in self.nodes for i in n.inputs))

    def __call__(self, x) -> np.ndarray:
        X = np.atleast_2d(np.asarray(x, dtype=float))
        U = np.zeros((len(X), self.m))
        for n in self.nodes:
            U[:, list(n.inputs)] = n.policy(X[:, list(n.states)])
        return U if np.ndim(x) > 1 else U[0]


def eval_composed(p: ComposedPolicy, x) -> np.ndarray:
    return p(x)


def _node_inputs(sys: ControlSystem, node: SubPolicyNode):
    return (sys.input_group_indices(node.inputs), sys.state_group_indices(node.effective_states()))


def solve_decomposition(sys: ControlSystem, d: Decomposition, cfg: GridConfig = GridConfig(),
                        dt: float | None = None, timings: dict | None = None) -> ComposedPolicy:
    """Solve every node innermost-first; cascaded nodes see their children's policies."""
    dt = backup_dt(sys, cfg) if dt is None else dt
    solved: dict[tuple, NodePolicy] = {}
    t0 = time.perf_counter()
    for path, node in d.nodes():
        inputs, states = _node_inputs(sys, node)
        inner_nodes = tuple(solved[p] for p in sorted(solved) if p[:len(path)] == path and len(p) > len(path))
        inner = ComposedPolicy(None, inner_nodes, sys.m) if inner_nodes else None
        problem = NodeProblem(sys, states, inputs, inner, dt, cfg.action_samples)
        stats = PIStats()
        try:
            vg, pg = policy_iteration(problem, cfg, stats)
        except ConvergenceError as exc:
            raise ConvergenceError(f"node {path}: {exc}", exc.residual, path) from exc
        if timings is not None:
            timings[path] = stats
        solved[path] = NodePolicy(path, node, tuple(states), tuple(inputs), pg, vg)
    order = tuple(solved[p] for p, _ in d.nodes())
    return ComposedPolicy(d, order, sys.m, time.perf_counter() - t0)


def full_grid_problem(sys: ControlSystem, policy: ComposedPolicy, dt: float):
    spec = GridSpec.for_axes(sys, range(sys.n))
    X = spec.points()
    U = np.clip(policy(X), sys.input_lower, sys.input_upper)
    from .systems import eval_cost
    f = sys.dynamics(X, U)
    nxt = X + dt * f
    if not np.all(np.isfinite(nxt)):
        raise NumericalError("non-finite successor state in grid evaluation")
    return spec, nxt, eval_cost(sys, X, U) * dt


@dataclass(frozen=True, eq=False)
class EvaluatedValue(ValueGrid):
    sweeps: int = 0
    residual: float = 0.0
    flagged: int = 0


def evaluate_policy_value(sys: ControlSystem, p: ComposedPolicy, cfg: GridConfig = GridConfig(),
                          dt: float | None = None, V0: ValueGrid | None = None,
                          ceiling: float | None = None) -> EvaluatedValue:
    """Value of ``p`` on the full grid by fixed-policy sweeps (no improvement).

    ``V0`` only seeds the iteration; the fixed point does not depend on it.
    Cells above ``ceiling`` are set to it and counted as flagged.
    """
    dt = backup_dt(sys, cfg) if dt is None else dt
    spec, nxt, c = full_grid_problem(sys, p, dt)
    idx, w = spec.locate(nxt)
    gamma = float(np.exp(-sys.lam * dt))
    start = np.zeros(spec.size) if V0 is None else np.asarray(V0.values, float).ravel().copy()
    V, n_sw, res = _sweeps(c, idx, w, start, gamma, cfg.tol, 50 * cfg.max_sweeps)
    flagged = 0
    if ceiling is not None:
        over = ~np.isfinite(V) | (V > ceiling)
        flagged = int(over.sum())
        V = np.where(over, ceiling, V)
    return EvaluatedValue(spec, V.reshape(spec.shape), int(n_sw), float(res), flagged)


def grid_epsilon(sys: ControlSystem, cfg: GridConfig, dt: float, vmax: float) -> float:
    """Bound on the distance of a stopped sweep from its fixed point.

    Sweeps stop when the change drops below ``tol (1 + vmax)``; for a
    gamma-contraction the remaining error is at most gamma / (1 - gamma) of that.
    """
    gamma = float(np.exp(-sys.lam * dt))
    return cfg.tol * (1.0 + vmax) * gamma / (1.0 - gamma)


def eval_mask(sys: ControlSystem, spec: GridSpec, axes=None) -> np.ndarray:
    """Grid vertices lying inside S_eval (inclusive, rounding tolerant)."""
    axes = list(range(sys.n)) if axes is None else list(axes)
    pts = spec.points()
    lo = sys.S_eval[axes, 0] - 1e-9
    hi = sys.S_eval[axes, 1] + 1e-9
    return np.all((pts >= lo) & (pts <= hi), axis=1).reshape(spec.shape)


def value_error(sys: ControlSystem, Vdelta: ValueGrid, Vstar: ValueGrid) -> float:
    """Mean of ``Vdelta - Vstar`` over the grid vertices inside S_eval."""
    if Vdelta.spec.shape != Vstar.spec.shape or not np.allclose(Vdelta.spec.lo, Vstar.spec.lo):
        raise ValueError("value grids must share axes")
    mask = eval_mask(sys, Vstar.spec)
    return float(np.mean((Vdelta.values - Vstar.values)[mask]))


def save_policy(path: str | Path, sys: ControlSystem, p: ComposedPolicy) -> list[Path]:
    """One container per node plus a JSON sidecar describing system and node."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    out = []
    for k, n in enumerate(p.nodes):
        side = {"system": system_to_dict(sys), "path": list(n.path), "states": list(n.states),
                "inputs": list(n.inputs), "kind": "policy",
                "decomposition": p.decomposition.to_dict() if p.decomposition else None}
        out.append(write_grid(path / f"node{k}.policy.pdgrid", n.policy.spec, n.policy.controls, side))
        if n.value is not None:
            side = dict(side, kind="value")
            out.append(write_grid(path / f"node{k}.value.pdgrid", n.value.spec, n.value.values, side))
    return out
