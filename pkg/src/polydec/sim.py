"""Closed-loop simulation with RK4 / zero-order hold and discounted cost."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .systems import ControlSystem, NumericalError, clamp_input, eval_cost

ENVELOPE_FACTOR = 10.0


class IntegrationError(NumericalError):
    """Non-finite state during a rollout."""

    def __init__(self, t: float, message: str = "non-finite state"):
        super().__init__(f"{message} at t={t:.6g}")
        self.t = t


def rk4_step(f: Callable, x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    """One classical Runge-Kutta step with ``u`` held over the step."""
    k1 = f(x, u)
    k2 = f(x + 0.5 * dt * k1, u)
    k3 = f(x + 0.5 * dt * k2, u)
    k4 = f(x + dt * k3, u)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def envelope_radius(sys: ControlSystem, factor: float = ENVELOPE_FACTOR) -> float:
    widths = sys.S_full[:, 1] - sys.S_full[:, 0]
    return float(factor * np.linalg.norm(widths))


def _excursion(sys: ControlSystem, x: np.ndarray) -> np.ndarray:
    """Distance from the centre of S_full, periodic axes wrapped."""
    centre = sys.S_full.mean(axis=1)
    return np.linalg.norm(sys.state_difference(x, centre), axis=-1)


@dataclass(frozen=True, eq=False)
class Rollout:
    dt: float
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    running_cost: np.ndarray
    discounted_cost: float
    terminated_early: bool = False
    reason: str = ""

    def to_csv(self, path: str | Path) -> Path:
        """Write ``t, x_*, u_*, running_cost`` rows with 17 significant digits."""
        path = Path(path)
        n, m = self.states.shape[1], self.inputs.shape[1]
        header = ["t"] + [f"x_{i}" for i in range(n)] + [f"u_{j}" for j in range(m)] + ["running_cost"]
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for k in range(len(self.inputs)):
                row = [self.times[k], *self.states[k], *self.inputs[k], self.running_cost[k]]
                w.writerow([f"{v:.17g}" for v in row])
        return path


@dataclass(frozen=True, eq=False)
class BatchRollout:
    dt: float
    times: np.ndarray
    states: np.ndarray          # (B, N+1, n)
    inputs: np.ndarray          # (B, N, m)
    running_cost: np.ndarray    # (B, N)
    discounted_cost: np.ndarray  # (B,)
    terminated_early: np.ndarray  # (B,) bool
    stop_index: np.ndarray      # (B,) steps actually integrated

    def __getitem__(self, b: int) -> Rollout:
        k = int(self.stop_index[b])
        return Rollout(self.dt, self.times[:k + 1], self.states[b, :k + 1], self.inputs[b, :k],
                       self.running_cost[b, :k], float(self.discounted_cost[b]),
                       bool(self.terminated_early[b]),
                       "left the state envelope" if self.terminated_early[b] else "")


def n_steps(T: float, dt: float) -> int:
    if not (T > 0 and dt > 0):
        raise ValueError("horizon and time step must be positive")
    return int(round(T / dt))


def rollout_batch(sys: ControlSystem, policy: Callable, X0, T: float, dt: float,
                  envelope: float | None = None, cost_ceiling=None) -> BatchRollout:
    """Simulate a batch of start states under ``policy`` (maps (B, n) -> (B, m)).

    Trajectories leaving the envelope, or whose accumulated cost passes
    ``cost_ceiling`` (per start), stop there and are marked terminated.
    """
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    B, n = X0.shape
    N = n_steps(T, dt)
    radius = envelope_radius(sys) if envelope is None else envelope
    ceiling = None if cost_ceiling is None else np.broadcast_to(np.asarray(cost_ceiling, float), (B,))
    f = sys.dynamics
    times = dt * np.arange(N + 1)
    disc = np.exp(-sys.lam * times)
    states = np.empty((B, N + 1, n))
    inputs = np.zeros((B, N, sys.m))
    running = np.zeros((B, N))
    total = np.zeros(B)
    active = np.ones(B, dtype=bool)
    early = np.zeros(B, dtype=bool)
    stop = np.full(B, N)
    states[:, 0] = X0
    x = X0.copy()
    for k in range(N):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            states[:, k:] = states[:, k:k + 1]
            break
        xa = x[idx]
        u = clamp_input(sys, policy(xa))
        c = eval_cost(sys, xa, u)
        inputs[idx, k] = u
        running[idx, k] = c
        total[idx] += disc[k] * c * dt
        xn = rk4_step(f, xa, u, dt)
        if not np.all(np.isfinite(xn)):
            raise IntegrationError(times[k + 1])
        x[idx] = xn
        states[:, k + 1] = x
        out = _excursion(sys, xn) > radius
        if ceiling is not None:
            out |= total[idx] > ceiling[idx]
        if np.any(out):
            hit = idx[out]
            early[hit] = True
            stop[hit] = k + 1
            active[hit] = False
    return BatchRollout(dt, times, states, inputs, running, total, early, stop)


def rollout(sys: ControlSystem, policy: Callable, x0, T: float, dt: float,
            envelope: float | None = None) -> Rollout:
    """Single-start rollout; ``policy`` maps a state vector to an input vector."""
    x0 = np.asarray(x0, dtype=float)
    batch = rollout_batch(sys, lambda X: np.atleast_2d(policy(X[0])), x0[None], T, dt, envelope)
    return batch[0]
