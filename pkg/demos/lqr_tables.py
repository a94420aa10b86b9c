"""Print the LQR value-gap tables for the 2-link manipulator and the biped.

    python demos/lqr_tables.py
"""

from polydec.decomp import enumerate_pure
from polydec.lqr import lqr_analysis
from polydec.pipeline import dense_rank
from polydec.systems import load_benchmark


def table(name):
    sys = load_benchmark(name)
    decs = enumerate_pure(sys)
    errs = [lqr_analysis(sys, d).err for d in decs]
    print(f"{name}: {len(decs)} decompositions")
    for d, e, r in sorted(zip(decs, errs, dense_rank(errs)), key=lambda t: t[2]):
        print(f"  {r:2d}  {e:10.3g}  {d.label(sys)}")


if __name__ == "__main__":
    table("manip2")
    table("biped3")
