"""Optimal control problem definitions and the four benchmark systems.

A :class:`ControlSystem` bundles continuous-time dynamics ``xdot = f(x, u)``,
box input bounds, a quadratic discounted cost around a goal ``(x_goal,
u_goal)``, the state-space boxes used by the grid solver and for error
averaging, and the state/input groupings that decompositions operate on.

All dynamics evaluators are vectorised: ``x`` has shape ``(..., n)`` and ``u``
shape ``(..., m)``; the result has the broadcast leading shape.

Benchmarks (state order, input order):

``cartpole``  (x, xdot, theta, thetadot), (F, tau); theta = 0 hangs down.
``biped3``    (l_r, alpha_r, xdot, zdot, theta, thetadot), (F_l, F_r, tau_l, tau_r).
``manip2``    (theta_1, theta_2, thetadot_1, thetadot_2), (tau_1, tau_2).
``manip3``    (theta_1..3, thetadot_1..3), (tau_1..3); theta_1 = 0 hangs down,
              further joint angles are relative.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

G = 9.81

Groups = tuple[tuple[str, tuple[int, ...]], ...]


class ConfigurationError(ValueError):
    """Raised for unknown benchmarks or inconsistent system definitions."""


class DynamicsDomainError(ArithmeticError):
    """Raised when dynamics are evaluated at a kinematically singular state."""


class NumericalError(ArithmeticError):
    """Raised when dynamics return non-finite values where finite ones are needed."""


# --------------------------------------------------------------------------
# Dynamics implementations
# --------------------------------------------------------------------------


def cartpole_dynamics(x, u, mc=5.0, mp=1.0, l=0.9, g=G):
    # Denominator is mc + mp*sin(theta), as printed (not the textbook sin^2).
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    xd, th, thd = x[..., 1], x[..., 2], x[..., 3]
    F, tau = u[..., 0], u[..., 1]
    s, c = np.sin(th), np.cos(th)
    s2 = np.sin(2.0 * th)
    den = mc + mp * s
    xdd = (F - tau / l * c + mp * l * thd**2 * s + 0.5 * mp * g * s2) / den
    thdd = (tau / l**2 * (mc / mp + 1.0) - F / l * c - 0.5 * mp * thd**2 * s2
            - g / l * (mc + mp) * s) / den
    xd, thd, xdd, thdd = np.broadcast_arrays(xd, thd, xdd, thdd)
    return np.stack([xd, xdd, thd, thdd], axis=-1)


def biped_leg_geometry(l_r, alpha_r, d_f=0.5):
    """Left leg length and angle from the right leg coordinates."""
    l_l = np.sqrt(l_r**2 + d_f**2 + 2.0 * l_r * d_f * np.cos(alpha_r))
    if np.any(l_l == 0.0) or np.any(np.asarray(l_r) == 0.0):
        raise DynamicsDomainError("biped leg length is zero (kinematic singularity)")
    alpha_l = np.arcsin(np.clip(l_r * np.sin(alpha_r) / l_l, -1.0, 1.0))
    return l_l, alpha_l


def biped_dynamics(x, u, m=72.0, I=3.0, d=0.2, d_f=0.5, l0=1.15, g=G):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    l_r, a_r, xd, zd, th, thd = (x[..., i] for i in range(6))
    F_l, F_r, tau_l, tau_r = (u[..., i] for i in range(4))
    l_l, a_l = biped_leg_geometry(l_r, a_r, d_f)

    # a leg longer than l0 has lost ground contact
    on_r = (l_r <= l0).astype(float)
    on_l = (l_l <= l0).astype(float)
    F_r, tau_r = F_r * on_r, tau_r * on_r
    F_l, tau_l = F_l * on_l, tau_l * on_l

    xdd = (F_r * np.cos(a_r) + tau_r / l_r * np.sin(a_r)
           + F_l * np.cos(a_l) + tau_l / l_l * np.sin(a_l)) / m
    zdd = (F_r * np.sin(a_r) - tau_r / l_r * np.cos(a_r)
           + F_l * np.sin(a_l) - tau_l / l_l * np.cos(a_l) - m * g) / m
    thdd = (tau_r * (1.0 + d / l_r * np.sin(a_r - th)) + F_r * d * np.cos(a_r - th)
            + tau_l * (1.0 + d / l_l * np.sin(a_l - th)) + F_l * d * np.cos(a_l - th)) / I

    # (xdot, zdot) is the COM velocity; the hip sits d below the COM along the torso
    hx = xd + d * thd * np.cos(th)
    hz = zd + d * thd * np.sin(th)
    l_r_dot = hx * np.cos(a_r) + hz * np.sin(a_r)
    a_r_dot = (-hx * np.sin(a_r) + hz * np.cos(a_r)) / l_r
    out = np.broadcast_arrays(l_r_dot, a_r_dot, xdd, zdd, thd, thdd)
    return np.stack(out, axis=-1)


def biped_stance_forces(l_r, alpha_r, d_f=0.5, m=72.0, g=G):
    """Leg forces (F_l, F_r) holding the biped static with zero hip torques."""
    l_l, a_l = biped_leg_geometry(l_r, alpha_r, d_f)
    M = np.array([[np.cos(a_l), np.cos(alpha_r)], [np.sin(a_l), np.sin(alpha_r)]])
    return np.linalg.solve(M, np.array([0.0, m * g]))


def manipulator_dynamics(x, u, masses=(1.25, 0.25), lengths=(0.25, 0.125), g=G,
                         mass_model="rod"):
    """Planar serial manipulator with relative joint angles.

    ``mass_model`` is ``"point"`` (masses at link tips) or ``"rod"`` (uniform
    links, centre of mass at mid-length with inertia m l^2 / 12).
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    N = len(masses)
    q, qd = x[..., :N], x[..., N:]
    lead = np.broadcast_shapes(q.shape[:-1], u.shape[:-1])
    q = np.broadcast_to(q, lead + (N,))
    qd = np.broadcast_to(qd, lead + (N,))
    u = np.broadcast_to(u, lead + (N,))

    phi = np.cumsum(q, axis=-1)  # absolute link angles
    phid = np.cumsum(qd, axis=-1)
    cphi, sphi = np.cos(phi), np.sin(phi)
    frac = 1.0 if mass_model == "point" else 0.5

    M = np.zeros(lead + (N, N))
    bias = np.zeros(lead + (N,))
    grav = np.zeros(lead + (N,))
    for i in range(N):
        # Jacobian of mass i position w.r.t. the relative joint angles
        Jx = np.zeros(lead + (N,))
        Jy = np.zeros(lead + (N,))
        ax = np.zeros(lead)
        ay = np.zeros(lead)
        for k in range(i + 1):
            lk = lengths[k] * (frac if k == i else 1.0)
            # link k rotates with every joint j <= k
            Jx[..., : k + 1] += (lk * cphi[..., k])[..., None]
            Jy[..., : k + 1] += (lk * sphi[..., k])[..., None]
            ax += -lk * sphi[..., k] * phid[..., k] ** 2
            ay += lk * cphi[..., k] * phid[..., k] ** 2
        mi = masses[i]
        M += mi * (Jx[..., :, None] * Jx[..., None, :] + Jy[..., :, None] * Jy[..., None, :])
        bias += mi * (Jx * ax[..., None] + Jy * ay[..., None])
        grav += mi * g * Jy
        if mass_model == "rod":
            inertia = mi * lengths[i] ** 2 / 12.0
            M[..., : i + 1, : i + 1] += inertia
    qdd = np.linalg.solve(M, (u - bias - grav)[..., None])[..., 0]
    return np.concatenate([qd, qdd], axis=-1)


def linear_dynamics(x, u, A, B):
    """xdot = A x + B u, for test problems and user-defined linear plants."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    return np.asarray(x, dtype=float) @ A.T + np.asarray(u, dtype=float) @ B.T


DYNAMICS: dict[str, Callable] = {
    "linear": linear_dynamics,
    "cartpole": cartpole_dynamics,
    "biped3": biped_dynamics,
    "manipulator": manipulator_dynamics,
}


# --------------------------------------------------------------------------
# Problem container
# --------------------------------------------------------------------------


def _as_groups(groups) -> Groups:
    if isinstance(groups, Mapping):
        groups = list(groups.items())
    return tuple((str(name), tuple(int(i) for i in idx)) for name, idx in groups)


@dataclass(frozen=True, eq=False)
class ControlSystem:
    """Immutable optimal control problem.

    Boxes are ``(n, 2)`` arrays of per-axis ``[lo, hi]``. Groups are tuples of
    ``(name, indices)`` pairs with zero-based component indices.
    """

    name: str
    n: int
    m: int
    dynamics_name: str
    dynamics_params: Mapping = field(default_factory=dict)
    input_lower: np.ndarray = None
    input_upper: np.ndarray = None
    goal_state: np.ndarray = None
    goal_input: np.ndarray = None
    Q: np.ndarray = None
    R: np.ndarray = None
    lam: float = 1.0
    S_full: np.ndarray = None
    S_eval: np.ndarray = None
    grid_shape: tuple[int, ...] = ()
    periodic_axes: frozenset[int] = frozenset()
    state_groups: Groups = ()
    input_groups: Groups = ()
    equilibrium_input: np.ndarray = None

    def __post_init__(self):
        arr = lambda v: None if v is None else np.array(v, dtype=float)
        for name in ("input_lower", "input_upper", "goal_state", "goal_input", "Q", "R",
                     "S_full", "S_eval", "equilibrium_input"):
            value = arr(getattr(self, name))
            if value is not None:
                value.setflags(write=False)
            object.__setattr__(self, name, value)
        if self.equilibrium_input is None:
            object.__setattr__(self, "equilibrium_input", self.goal_input)
        object.__setattr__(self, "grid_shape", tuple(int(s) for s in self.grid_shape))
        object.__setattr__(self, "periodic_axes", frozenset(int(i) for i in self.periodic_axes))
        object.__setattr__(self, "state_groups", _as_groups(self.state_groups))
        object.__setattr__(self, "input_groups", _as_groups(self.input_groups))
        object.__setattr__(self, "dynamics_params", dict(self.dynamics_params))
        if self.dynamics_name not in DYNAMICS:
            raise ConfigurationError(f"unknown dynamics {self.dynamics_name!r}")
        self._check()

    def _check(self):
        n, m = self.n, self.m
        shapes = {"Q": (n, n), "R": (m, m), "goal_state": (n,), "goal_input": (m,),
                  "input_lower": (m,), "input_upper": (m,), "S_full": (n, 2), "S_eval": (n, 2)}
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ConfigurationError(f"{name} must have shape {shape}")
        if len(self.grid_shape) != n:
            raise ConfigurationError("grid_shape must have one entry per state")
        if not self.lam > 0:
            raise ConfigurationError("discount rate must be positive")
        if not np.allclose(self.Q, self.Q.T) or np.linalg.eigvalsh(self.Q).min() < -1e-12:
            raise ConfigurationError("Q must be symmetric positive semidefinite")
        if not np.allclose(self.R, self.R.T) or np.linalg.eigvalsh(self.R).min() <= 0:
            raise ConfigurationError("R must be symmetric positive definite")
        if np.any(self.goal_input < self.input_lower) or np.any(self.goal_input > self.input_upper):
            raise ConfigurationError("goal input outside the input bounds")
        lo, hi = self.S_full[:, 0], self.S_full[:, 1]
        if np.any(self.goal_state < lo) or np.any(self.goal_state > hi):
            raise ConfigurationError("goal state outside S_full")
        if np.any(self.S_eval[:, 0] < lo - 1e-12) or np.any(self.S_eval[:, 1] > hi + 1e-12):
            raise ConfigurationError("S_eval must lie inside S_full")
        for label, groups, size in (("state", self.state_groups, n), ("input", self.input_groups, m)):
            flat = sorted(i for _, idx in groups for i in idx)
            if flat != list(range(size)) or any(len(idx) == 0 for _, idx in groups):
                raise ConfigurationError(f"{label} groups must partition 0..{size - 1}")

    # derived helpers -------------------------------------------------------

    @property
    def dynamics(self) -> Callable:
        fn = DYNAMICS[self.dynamics_name]
        params = self.dynamics_params
        return lambda x, u: fn(x, u, **params)

    def state_group_indices(self, ids: Sequence[int]) -> list[int]:
        return sorted(i for g in ids for i in self.state_groups[g][1])

    def input_group_indices(self, ids: Sequence[int]) -> list[int]:
        return sorted(i for g in ids for i in self.input_groups[g][1])

    def with_groups(self, state_groups=None, input_groups=None) -> "ControlSystem":
        """Copy with new groupings; ``"singletons"`` gives one group per component."""
        def resolve(groups, size, prefix):
            if isinstance(groups, str) and groups == "singletons":
                return tuple((f"{prefix}{i}", (i,)) for i in range(size))
            return groups
        return replace(
            self,
            state_groups=resolve(state_groups, self.n, "x") if state_groups is not None else self.state_groups,
            input_groups=resolve(input_groups, self.m, "u") if input_groups is not None else self.input_groups,
        )

    def scaled_grid(self, scale: float) -> "ControlSystem":
        """Copy whose grid has ``round((N - 1) * scale) + 1`` points per axis."""
        shape = tuple(max(2, int(round((s - 1) * scale)) + 1) for s in self.grid_shape)
        return replace(self, grid_shape=shape)

    def state_difference(self, x, ref=None):
        """x - ref with periodic axes wrapped into (-pi, pi]."""
        ref = self.goal_state if ref is None else ref
        dx = np.asarray(x, dtype=float) - ref
        for i in self.periodic_axes:
            dx[..., i] = wrap_angle(dx[..., i])
        return dx


def wrap_angle(a):
    """Map angles into (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


# --------------------------------------------------------------------------
# Operations
# --------------------------------------------------------------------------


def eval_dynamics(sys: ControlSystem, x, u) -> np.ndarray:
    """Time derivative of the state; input bounds are not applied here."""
    return sys.dynamics(x, u)


def eval_cost(sys: ControlSystem, x, u) -> np.ndarray:
    """Quadratic running cost rate (vectorised over leading axes)."""
    dx = sys.state_difference(x)
    du = np.asarray(u, dtype=float) - sys.goal_input
    return (np.einsum("...i,ij,...j->...", dx, sys.Q, dx)
            + np.einsum("...i,ij,...j->...", du, sys.R, du))


def clamp_input(sys: ControlSystem, u) -> np.ndarray:
    return np.clip(u, sys.input_lower, sys.input_upper)


def fd_steps(x0) -> np.ndarray:
    return np.maximum(1e-6, 1e-6 * np.abs(np.asarray(x0, dtype=float)))


def jacobians(f, x0, u0):
    """Central-difference Jacobians of ``f`` (vectorised evaluator) at (x0, u0)."""
    x0 = np.asarray(x0, dtype=float)
    u0 = np.asarray(u0, dtype=float)
    n, m = x0.shape[-1], u0.shape[-1]
    hx, hu = fd_steps(x0), fd_steps(u0)
    X = np.repeat(x0[None], 2 * (n + m), axis=0)
    U = np.repeat(u0[None], 2 * (n + m), axis=0)
    for i in range(n):
        X[2 * i, i] += hx[i]
        X[2 * i + 1, i] -= hx[i]
    for j in range(m):
        U[2 * (n + j), j] += hu[j]
        U[2 * (n + j) + 1, j] -= hu[j]
    F = f(X, U)
    if not np.all(np.isfinite(F)):
        raise NumericalError("non-finite dynamics while linearising")
    A = ((F[0:2 * n:2] - F[1:2 * n:2]) / (2.0 * hx[:, None])).T
    B = ((F[2 * n::2] - F[2 * n + 1::2]) / (2.0 * hu[:, None])).T
    return A, B


def linearize(sys: ControlSystem, x0, u0) -> tuple[np.ndarray, np.ndarray]:
    """Finite-difference (A, B) of the continuous dynamics at (x0, u0)."""
    return jacobians(sys.dynamics, x0, u0)


# --------------------------------------------------------------------------
# Benchmarks
# --------------------------------------------------------------------------

PI = np.pi

# Biped goal: hip midway between the footholds (right foot at 0, left foot
# at -d_f), torso upright, both legs BIPED_LEG_LENGTH long.
BIPED_LEG_LENGTH = 0.96


def biped_goal(d_f=0.5, leg_length=BIPED_LEG_LENGTH):
    hx = -0.5 * d_f
    height = np.sqrt(leg_length**2 - hx**2)
    return np.array([leg_length, float(np.arctan2(height, hx)), 0.0, 0.0, 0.0, 0.0])


def _cartpole() -> ControlSystem:
    return ControlSystem(
        name="cartpole", n=4, m=2, dynamics_name="cartpole",
        dynamics_params=dict(mc=5.0, mp=1.0, l=0.9),
        input_lower=[-6.0, -6.0], input_upper=[6.0, 6.0],
        goal_state=[0.0, 0.0, PI, 0.0], goal_input=[0.0, 0.0],
        Q=np.diag([25.0, 0.02, 25.0, 0.02]), R=1e-3 * np.eye(2), lam=3.0,
        S_full=[[-1.5, 1.5], [-3.0, 3.0], [0.0, 2 * PI], [-3.0, 3.0]],
        S_eval=[[-0.5, 0.5], [-1.0, 1.0], [2 * PI / 3, 4 * PI / 3], [-1.0, 1.0]],
        grid_shape=(31, 31, 31, 31), periodic_axes={2},
        state_groups=[("x", (0,)), ("xdot", (1,)), ("theta", (2,)), ("thetadot", (3,))],
        input_groups=[("F", (0,)), ("tau", (1,))],
    )


def _biped() -> ControlSystem:
    m, l0 = 72.0, 1.15
    goal = biped_goal()
    forces = biped_stance_forces(goal[0], goal[1], m=m)
    u_goal = np.array([forces[0], forces[1], 0.0, 0.0])
    tau_max = 0.25 * m * G / l0
    return ControlSystem(
        name="biped3", n=6, m=4, dynamics_name="biped3",
        dynamics_params=dict(m=m, I=3.0, d=0.2, d_f=0.5, l0=l0),
        input_lower=[0.0, 0.0, -tau_max, -tau_max],
        input_upper=[3 * m * G, 3 * m * G, tau_max, tau_max],
        goal_state=goal, goal_input=u_goal,
        Q=np.diag([350.0, 700.0, 1.5, 1.5, 500.0, 5.0]),
        R=1e-6 * np.diag([1.0, 1.0, 10.0, 10.0]), lam=1.0,
        S_full=[[0.85, 1.25], [PI / 2, PI / 2 + 0.6], [-0.3, 0.5], [-0.5, 1.0],
                [-PI / 8, PI / 8], [-2.0, 2.0]],
        S_eval=[[0.95, 1.0], [PI / 2 + 0.3, PI / 2 + 0.4], [-0.1, 0.1], [-0.3, 0.3],
                [-0.2, 0.2], [-0.2, 0.2]],
        grid_shape=(13, 13, 14, 19, 14, 21),
        state_groups=[("com", (0, 1, 2, 3)), ("torso", (4, 5))],
        input_groups=[("F", (0, 1)), ("tau", (2, 3))],
    )


def _manip2() -> ControlSystem:
    return ControlSystem(
        name="manip2", n=4, m=2, dynamics_name="manipulator",
        dynamics_params=dict(masses=(1.25, 0.25), lengths=(0.25, 0.125)),
        input_lower=[-5.0, -0.5], input_upper=[5.0, 0.5],
        goal_state=[PI, 0.0, 0.0, 0.0], goal_input=[0.0, 0.0],
        Q=np.diag([1.6, 1.6, 0.12, 0.12]), R=np.diag([0.003, 0.3]), lam=3.0,
        S_full=[[0.0, 2 * PI], [-PI, PI], [-3.0, 3.0], [-3.0, 3.0]],
        S_eval=[[2 * PI / 3, 4 * PI / 3], [-PI / 3, PI / 3], [-0.5, 0.5], [-0.5, 0.5]],
        grid_shape=(31, 31, 31, 31), periodic_axes={0, 1},
        state_groups=[("Theta1", (0, 2)), ("Theta2", (1, 3))],
        input_groups=[("tau1", (0,)), ("tau2", (1,))],
    )


def _manip3() -> ControlSystem:
    return ControlSystem(
        name="manip3", n=6, m=3, dynamics_name="manipulator",
        dynamics_params=dict(masses=(2.75, 0.55, 0.11), lengths=(0.5, 0.25, 0.125)),
        input_lower=[-16.0, -7.5, -1.0], input_upper=[16.0, 7.5, 1.0],
        goal_state=[PI, 0.0, 0.0, 0.0, 0.0, 0.0], goal_input=[0.0, 0.0, 0.0],
        Q=np.diag([1.6, 1.6, 1.6, 0.12, 0.12, 0.12]), R=np.diag([0.004, 0.04, 0.4]), lam=3.0,
        S_full=[[0.0, 2 * PI], [-PI, PI], [-PI, PI], [-3.0, 3.0], [-3.0, 3.0], [-3.0, 3.0]],
        S_eval=[[2 * PI / 3, 4 * PI / 3], [-PI / 3, PI / 3], [-PI / 3, PI / 3],
                [-0.5, 0.5], [-0.5, 0.5], [-0.5, 0.5]],
        grid_shape=(17, 17, 17, 13, 13, 13), periodic_axes={0, 1, 2},
        state_groups=[("Theta1", (0, 3)), ("Theta2", (1, 4)), ("Theta3", (2, 5))],
        input_groups=[("tau1", (0,)), ("tau2", (1,)), ("tau3", (2,))],
    )


# Rollout horizons (s) used by the DDP estimate and the LQR error bar.
HORIZONS = {"cartpole": 5.0, "biped3": 4.0, "manip2": 4.0, "manip3": 4.0}

BENCHMARKS = {"cartpole": _cartpole, "biped3": _biped, "manip2": _manip2, "manip3": _manip3}


def load_benchmark(name: str) -> ControlSystem:
    try:
        return BENCHMARKS[name]()
    except KeyError:
        raise ConfigurationError(
            f"unknown benchmark {name!r}; expected one of {sorted(BENCHMARKS)}") from None


# --------------------------------------------------------------------------
# JSON system definitions
# --------------------------------------------------------------------------


def system_to_dict(sys: ControlSystem) -> dict:
    params = {k: list(v) if isinstance(v, tuple) else v for k, v in sys.dynamics_params.items()}
    return {
        "name": sys.name,
        "n": sys.n,
        "m": sys.m,
        "dynamics": {"name": sys.dynamics_name, "params": params},
        "input_lower": sys.input_lower.tolist(),
        "input_upper": sys.input_upper.tolist(),
        "goal_state": sys.goal_state.tolist(),
        "goal_input": sys.goal_input.tolist(),
        "equilibrium_input": sys.equilibrium_input.tolist(),
        "Q": sys.Q.tolist(),
        "R": sys.R.tolist(),
        "lambda": sys.lam,
        "S_full": sys.S_full.tolist(),
        "S_eval": sys.S_eval.tolist(),
        "grid_shape": list(sys.grid_shape),
        "periodic_axes": sorted(sys.periodic_axes),
        "state_groups": [{"name": n, "indices": list(i)} for n, i in sys.state_groups],
        "input_groups": [{"name": n, "indices": list(i)} for n, i in sys.input_groups],
    }


def system_from_dict(doc: Mapping) -> ControlSystem:
    try:
        dyn = doc["dynamics"]
        params = {k: tuple(v) if isinstance(v, list) else v for k, v in dyn.get("params", {}).items()}
        return ControlSystem(
            name=doc.get("name", dyn["name"]), n=int(doc["n"]), m=int(doc["m"]),
            dynamics_name=dyn["name"], dynamics_params=params,
            input_lower=doc["input_lower"], input_upper=doc["input_upper"],
            goal_state=doc["goal_state"], goal_input=doc["goal_input"],
            equilibrium_input=doc.get("equilibrium_input"),
            Q=doc["Q"], R=doc["R"], lam=float(doc["lambda"]),
            S_full=doc["S_full"], S_eval=doc["S_eval"], grid_shape=doc["grid_shape"],
            periodic_axes=doc.get("periodic_axes", []),
            state_groups=[(g["name"], g["indices"]) for g in doc["state_groups"]],
            input_groups=[(g["name"], g["indices"]) for g in doc["input_groups"]],
        )
    except (KeyError, TypeError) as exc:
        raise ConfigurationError(f"malformed system definition: {exc}") from exc


def load_system(path_or_name: str | Path) -> ControlSystem:
    """Benchmark id or path to a JSON system definition."""
    if str(path_or_name) in BENCHMARKS:
        return load_benchmark(str(path_or_name))
    path = Path(path_or_name)
    if not path.exists():
        raise ConfigurationError(f"no benchmark or system file named {str(path_or_name)!r}")
    return system_from_dict(json.loads(path.read_text(encoding="utf-8")))
