"""Recover the cart-pole from every corner of the evaluation box with the
cascade pi_F(x, pi_tau(theta, thetadot)) and with the undecomposed policy.

    python demos/recover.py [out.csv]

Solves two 21^4 grid problems; about two minutes on a desktop.
"""

import sys

import numpy as np

from polydec.decomp import Decomposition
from polydec.gps import GridConfig, backup_dt, solve_decomposition
from polydec.lqr import box_corners
from polydec.sim import rollout, rollout_batch
from polydec.systems import load_benchmark, wrap_angle

plant = load_benchmark("cartpole").scaled_grid(2 / 3)
cfg = GridConfig()
dt = backup_dt(plant, cfg)
X0 = box_corners(plant.S_eval)
cascade = Decomposition.cascade([((1,), (2, 3)), ((0,), (0, 1))])

for name, d in (("undecomposed", Decomposition.full(plant)), ("cascade", cascade)):
    policy = solve_decomposition(plant, d, cfg, dt)
    batch = rollout_batch(plant, policy, X0, 5.0, 1e-3)
    tilt = np.abs(wrap_angle(batch.states[:, -1, 2] - np.pi))
    print(f"{name:13s} mean discounted cost {batch.discounted_cost.mean():8.4f}, "
          f"worst final tilt {tilt.max():.3f} rad")

path = rollout(plant, policy, X0[0], 5.0, 1e-3).to_csv(sys.argv[1] if len(sys.argv) > 1 else "recover.csv")
print(f"cascade rollout from corner 0 in {path}")
