"""LQR estimate of a decomposition's value error.

The system is linearised about the goal. Each sub-policy becomes an LQR
controller for its subsystem: decoupled subsystems see complement inputs at
zero, cascaded ones additionally see the closed-loop effect ``-B_j K_j`` of
every inner sub-policy. The sub-gains are stacked into one block-structured
gain, whose discounted closed-loop value comes from a Lyapunov equation and
is compared with the Riccati solution of the undecomposed problem.

Discounting ``exp(-lam t)`` enters only through the shift ``A - lam/2 I``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .decomp import Decomposition, SubPolicyNode
from .systems import HORIZONS, ControlSystem, clamp_input, linearize

STABILITY_MARGIN = 1e-9


class Unstabilizable(np.linalg.LinAlgError):
    """The (shifted) pair (A, B) has an uncontrollable non-decaying mode."""


@dataclass(frozen=True, eq=False)
class LinearModel:
    A: np.ndarray
    B: np.ndarray
    x0: np.ndarray
    u0: np.ndarray


@dataclass(frozen=True, eq=False)
class GainMatrix:
    K: np.ndarray
    block_mask: np.ndarray


@dataclass(frozen=True, eq=False)
class QuadraticValue:
    P: np.ndarray
    center: np.ndarray
    stable: bool

    def __call__(self, x):
        if not self.stable:
            return np.full(np.shape(x)[:-1], np.inf)
        dx = np.asarray(x, dtype=float) - self.center
        return np.einsum("...i,ij,...j->...", dx, self.P, dx)


@dataclass(frozen=True, eq=False)
class SubsystemModel:
    """Linear subsystem of one sub-policy together with its quadratic cost."""

    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    N: np.ndarray  # state-input cross weight from inner inputs
    state_idx: list[int]
    input_idx: list[int]
    Pi: np.ndarray = field(default=None)


def _residual_ok(res: np.ndarray, P: np.ndarray) -> bool:
    return np.linalg.norm(res) <= 1e-8 * (1.0 + np.linalg.norm(P))


def is_stabilizable(A: np.ndarray, B: np.ndarray, tol: float = 1e-9) -> bool:
    """PBH test on the modes with non-negative real part."""
    n = A.shape[0]
    scale = max(1.0, np.linalg.norm(A), np.linalg.norm(B))
    for lam in np.linalg.eigvals(A):
        if lam.real >= -tol:
            M = np.hstack([A - lam * np.eye(n), B.astype(complex)])
            s = np.linalg.svd(M, compute_uv=False)
            if s[-1] <= 1e-8 * scale:
                return False
    return True


def solve_lqr(A, B, Q, R, lam, N=None) -> tuple[np.ndarray, np.ndarray]:
    """Discounted infinite-horizon LQR: returns ``(K, P)`` with ``u = -K x``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    n = A.shape[0]
    N = np.zeros(B.shape) if N is None else np.asarray(N, dtype=float)
    As = A - 0.5 * lam * np.eye(n)
    if not is_stabilizable(As, B):
        raise Unstabilizable("shifted pair (A - lam/2 I, B) is not stabilizable")
    try:
        # scipy's balancing casts an unused permutation vector that can hold NaN
        with np.errstate(invalid="ignore"):
            P = scipy.linalg.solve_continuous_are(As, B, Q, R, s=N)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise Unstabilizable(str(exc)) from exc
    P = 0.5 * (P + P.T)
    K = np.linalg.solve(R, B.T @ P + N.T)
    res = As.T @ P + P @ As - (P @ B + N) @ K + Q
    if not (np.all(np.isfinite(P)) and _residual_ok(res, P)):
        P = _refine_care(As, B, Q, R, N, P)
        K = np.linalg.solve(R, B.T @ P + N.T)
    return K, P


def _refine_care(As, B, Q, R, N, P, iterations=20):
    """Newton-Kleinman steps to polish a Riccati solution."""
    for _ in range(iterations):
        K = np.linalg.solve(R, B.T @ P + N.T)
        Acl = As - B @ K
        P = scipy.linalg.solve_continuous_lyapunov(Acl.T, -(Q + K.T @ R @ K - N @ K - K.T @ N.T))
        P = 0.5 * (P + P.T)
        res = As.T @ P + P @ As - (P @ B + N) @ np.linalg.solve(R, B.T @ P + N.T) + Q
        if _residual_ok(res, P):
            break
    return P


def care_residual(A, B, Q, R, lam, P, N=None) -> float:
    n = A.shape[0]
    N = np.zeros(B.shape) if N is None else N
    As = A - 0.5 * lam * np.eye(n)
    K = np.linalg.solve(R, B.T @ P + N.T)
    return float(np.linalg.norm(As.T @ P + P @ As - (P @ B + N) @ K + Q))


def linear_model(sys: ControlSystem) -> LinearModel:
    A, B = linearize(sys, sys.goal_state, sys.goal_input)
    return LinearModel(A, B, sys.goal_state.copy(), sys.goal_input.copy())


def linearization_input(sys: ControlSystem, node: SubPolicyNode) -> np.ndarray:
    """Goal input on the node's and inner inputs, zero on every other input."""
    u = np.zeros(sys.m)
    idx = sys.input_group_indices(node.inputs + node.descendant_inputs())
    u[idx] = sys.goal_input[idx]
    return u


def subsystem_model(sys: ControlSystem, node: SubPolicyNode, inner_gains: dict,
                    inner_input_cost: bool = True) -> SubsystemModel:
    """Linear model and cost of one sub-policy.

    ``inner_gains`` maps every descendant node to its gain over the
    descendant's effective states. Inner sub-policies enter through
    ``Pi = -B_j K_j`` placed on the inner node's state columns.
    """
    xi = sys.state_group_indices(node.effective_states())
    ui = sys.input_group_indices(node.inputs)
    A, B = linearize(sys, sys.goal_state, linearization_input(sys, node))
    pos = {s: k for k, s in enumerate(xi)}

    # inner inputs as a linear function of the subsystem state: u_desc = G x_i
    desc_u: list[int] = []
    G_rows = []
    for inner in node.descendants():
        if inner not in inner_gains:
            raise KeyError(f"missing gain for inner sub-policy with inputs {inner.inputs}")
        Kj = inner_gains[inner]
        xj = sys.state_group_indices(inner.effective_states())
        uj = sys.input_group_indices(inner.inputs)
        rows = np.zeros((len(uj), len(xi)))
        rows[:, [pos[s] for s in xj]] = -Kj
        desc_u.extend(uj)
        G_rows.append(rows)
    G = np.vstack(G_rows) if G_rows else np.zeros((0, len(xi)))

    Ai = A[np.ix_(xi, xi)]
    Pi = B[np.ix_(xi, desc_u)] @ G if desc_u else np.zeros_like(Ai)
    Bi = B[np.ix_(xi, ui)]
    Qi = sys.Q[np.ix_(xi, xi)]
    Ri = sys.R[np.ix_(ui, ui)]
    Ni = np.zeros((len(xi), len(ui)))
    if desc_u and inner_input_cost:
        Rdd = sys.R[np.ix_(desc_u, desc_u)]
        Qi = Qi + G.T @ Rdd @ G
        Ni = G.T @ sys.R[np.ix_(desc_u, ui)]
    return SubsystemModel(Ai + Pi, Bi, Qi, Ri, Ni, xi, ui, Pi)


def decomposition_gains(sys: ControlSystem, d: Decomposition, inner_input_cost: bool = True) -> dict:
    """Solve every sub-policy LQR, innermost first; raises :class:`Unstabilizable`."""
    gains: dict = {}
    for _, node in d.nodes():
        sub = subsystem_model(sys, node, gains, inner_input_cost)
        K, _ = solve_lqr(sub.A, sub.B, sub.Q, sub.R, sys.lam, sub.N)
        gains[node] = K
    return gains


def assemble_gain(sys: ControlSystem, d: Decomposition, gains: dict) -> GainMatrix:
    """Place each sub-gain at (its input rows, its effective state columns)."""
    K = np.zeros((sys.m, sys.n))
    mask = np.zeros((sys.m, sys.n), dtype=bool)
    for _, node in d.nodes():
        rows = sys.input_group_indices(node.inputs)
        cols = sys.state_group_indices(node.effective_states())
        if mask[np.ix_(rows, cols)].any():
            raise RuntimeError("overlapping sub-gain placement")
        K[np.ix_(rows, cols)] = gains[node]
        mask[np.ix_(rows, cols)] = True
    return GainMatrix(K, mask)


def closed_loop_value(model: LinearModel, K, Q, R, lam) -> QuadraticValue:
    """Discounted value ``x' P x`` of ``u = u0 - K (x - x0)`` on the linear model."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    A = np.atleast_2d(model.A)
    B = np.atleast_2d(model.B)
    n = A.shape[0]
    Acl = A - B @ K - 0.5 * lam * np.eye(n)
    if np.max(np.linalg.eigvals(Acl).real) >= -STABILITY_MARGIN:
        return QuadraticValue(np.full((n, n), np.inf), model.x0, False)
    rhs = np.atleast_2d(Q) + K.T @ np.atleast_2d(R) @ K
    P = scipy.linalg.solve_continuous_lyapunov(Acl.T, -rhs)
    P = 0.5 * (P + P.T)
    return QuadraticValue(P, model.x0, True)


def lyapunov_residual(model: LinearModel, K, Q, R, lam, P) -> float:
    n = model.A.shape[0]
    Acl = model.A - model.B @ K - 0.5 * lam * np.eye(n)
    return float(np.linalg.norm(Acl.T @ P + P @ Acl + Q + K.T @ R @ K))


def box_moments(sys: ControlSystem, box=None) -> tuple[np.ndarray, np.ndarray]:
    """Mean offset from the goal and covariance of the uniform law on ``box``."""
    box = sys.S_eval if box is None else np.asarray(box, dtype=float)
    center = box.mean(axis=1)
    width = box[:, 1] - box[:, 0]
    return sys.state_difference(center), np.diag(width**2 / 12.0)


def box_mean_quadratic(sys: ControlSystem, M: np.ndarray, box=None) -> float:
    """Mean of ``dx' M dx`` for x uniform on the box (dx relative to the goal)."""
    mu, cov = box_moments(sys, box)
    return float(np.trace(M @ cov) + mu @ M @ mu)


@dataclass(frozen=True, eq=False)
class LQRAnalysis:
    err: float
    gain: GainMatrix | None
    value: QuadraticValue | None
    optimal: QuadraticValue
    K_opt: np.ndarray
    reason: str = ""


def lqr_analysis(sys: ControlSystem, d: Decomposition, inner_input_cost: bool = True,
                 model: LinearModel | None = None) -> LQRAnalysis:
    model = linear_model(sys) if model is None else model
    K_opt, P_opt = solve_lqr(model.A, model.B, sys.Q, sys.R, sys.lam)
    optimal = QuadraticValue(P_opt, model.x0, True)
    if d.is_full:
        # P^delta is P* by definition; skip the round-off of a second solve
        return LQRAnalysis(0.0, GainMatrix(K_opt, np.ones(K_opt.shape, dtype=bool)), optimal,
                           optimal, K_opt)
    try:
        gains = decomposition_gains(sys, d, inner_input_cost)
    except Unstabilizable as exc:
        return LQRAnalysis(np.inf, None, None, optimal, K_opt, f"unstabilizable subsystem: {exc}")
    gain = assemble_gain(sys, d, gains)
    value = closed_loop_value(model, gain.K, sys.Q, sys.R, sys.lam)
    if not value.stable:
        return LQRAnalysis(np.inf, gain, value, optimal, K_opt, "closed loop unstable")
    err = box_mean_quadratic(sys, value.P - P_opt)
    return LQRAnalysis(err, gain, value, optimal, K_opt)


def err_lqr(sys: ControlSystem, d: Decomposition, inner_input_cost: bool = True) -> float:
    """Mean over S_eval of the LQR value gap; ``inf`` when unstabilizable or unstable."""
    return lqr_analysis(sys, d, inner_input_cost).err


# --------------------------------------------------------------------------
# Input-bound error bar
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SaturationConfig:
    """Start-state sampling and rollout settings for the input-bound error bar.

    ``starts`` is ``"corners+center"``, ``"corners"`` or ``"gauss"`` (the
    2-point Gauss-Legendre tensor grid, whose sample mean of any quadratic
    equals its mean over the box).
    """

    horizon: float | None = None
    dt: float = 1e-3
    ceiling_factor: float = 100.0
    starts: str = "corners+center"


@dataclass(frozen=True, eq=False)
class SaturationResult:
    error: float
    flagged: tuple[int, ...]
    costs_decomposed: np.ndarray
    costs_optimal: np.ndarray


def box_corners(box) -> np.ndarray:
    """The 2^n corners of an axis-aligned box, in binary counting order (axis 0 slowest)."""
    box = np.asarray(box, dtype=float)
    n = box.shape[0]
    bits = np.array(list(np.ndindex(*(2,) * n)))
    return np.where(bits == 0, box[:, 0], box[:, 1])


def _start_states(sys: ControlSystem, cfg: SaturationConfig) -> np.ndarray:
    box = sys.S_eval
    if cfg.starts == "gauss":
        mid, half = box.mean(axis=1), 0.5 * (box[:, 1] - box[:, 0]) / np.sqrt(3.0)
        return box_corners(np.stack([mid - half, mid + half], axis=1))
    corners = box_corners(box)
    if cfg.starts == "corners":
        return corners
    if cfg.starts != "corners+center":
        raise ValueError(f"unknown start-state rule {cfg.starts!r}")
    return np.vstack([corners, box.mean(axis=1)[None]])


def lqr_saturated_error(sys: ControlSystem, d: Decomposition,
                        cfg: SaturationConfig = SaturationConfig()) -> SaturationResult:
    """Discounted-cost gap of clamped linear policies on the nonlinear dynamics.

    Rollouts whose cost exceeds ``ceiling_factor`` times the clamped optimal
    LQR cost from the same start are capped there and flagged.
    """
    from .sim import rollout_batch

    analysis = lqr_analysis(sys, d)
    if analysis.gain is None or not analysis.value.stable:
        raise Unstabilizable("decomposition has no stable LQR gain")
    x0 = _start_states(sys, cfg)

    def linear_policy(K):
        return lambda x: clamp_input(sys, sys.goal_input - sys.state_difference(x) @ K.T)

    T = cfg.horizon if cfg.horizon is not None else HORIZONS.get(sys.name, 4.0)
    ref = rollout_batch(sys, linear_policy(analysis.K_opt), x0, T, cfg.dt)
    dec = rollout_batch(sys, linear_policy(analysis.gain.K), x0, T, cfg.dt,
                        cost_ceiling=cfg.ceiling_factor * np.maximum(ref.discounted_cost, 1e-12))
    ceiling = cfg.ceiling_factor * np.maximum(ref.discounted_cost, 1e-12)
    capped = np.minimum(dec.discounted_cost, ceiling)
    bad = ~np.isfinite(dec.discounted_cost) | (dec.discounted_cost > ceiling) | dec.terminated_early
    capped = np.where(bad, ceiling, capped)
    flagged = tuple(int(i) for i in np.flatnonzero(bad))
    return SaturationResult(float(np.mean(capped - ref.discounted_cost)), flagged,
                            capped, ref.discounted_cost)
