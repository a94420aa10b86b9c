"""Screen all 44 cart-pole decompositions and check them against grid solves.

    python demos/cartpole_screen.py [grid_scale] [out_dir]

With the default scale 2/3 every axis has 21 points; expect about half an
hour on a desktop. Scale 1.0 gives the full 31^4 grid and takes many hours.
"""

import sys

from scipy.stats import spearmanr

from polydec.decomp import Decomposition
from polydec.pipeline import RunConfig, prepare_system, run_pipeline

scale = float(sys.argv[1]) if len(sys.argv) > 1 else 2 / 3
out = sys.argv[2] if len(sys.argv) > 2 else "cartpole-out"
cfg = RunConfig(system="cartpole", grid_scale=scale, solve=True, verify=True, lqr_bar=False, out=out)
plant = prepare_system(cfg)
report = run_pipeline(cfg, progress=lambda stage, k: print(stage, k, flush=True))

rows = sorted(report.rows[1:], key=lambda r: r.err)
for r in rows[:10]:
    print(f"{r.r:3d} err={r.err:8.4f} err_lqr={r.err_lqr:9.4g}  {Decomposition.from_json(r.serialization).label(plant)}")
rho = spearmanr([r.time_est for r in rows], [r.time_meas for r in rows]).statistic
print(f"spearman(time_est, time_meas) = {rho:.3f}; full solve {report.rows[0].time_meas:.1f} s")
