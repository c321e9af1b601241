"""Objective and RSE traces of PG-BFGS and NPG-BFGS on the 64x64 benchmark.

    python scripts/acceleration.py --out results/accel --noise poisson lognormal
"""

import argparse
from pathlib import Path

import numpy as np

from polyct import io
from polyct.experiments import acceleration


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("results/accel"))
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--iterations", type=int, default=1000)
    ap.add_argument("--noise", nargs="+", default=["poisson"], choices=["poisson", "lognormal"])
    args = ap.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    for noise in args.noise:
        run = acceleration(args.size, noise=noise, iterations=args.iterations)
        io.save_trace(args.out / f"pg_bfgs_{noise}.csv", run.pg.traces)
        io.save_trace(args.out / f"npg_bfgs_{noise}.csv", run.npg.traces)
        f_pg = run.pg.trace_array("objective")
        f_npg = run.npg.trace_array("objective")
        f_min = min(f_pg.min(), f_npg.min())
        # relative suboptimality against the best value either run found
        for k in sorted({k for k in (10, 100, len(f_pg) - 1) if k < len(f_pg)}):
            print(f"{noise} k={k + 1:5d}  PG {(f_pg[k] - f_min) / abs(f_min):.3e}  "
                  f"NPG {(f_npg[k] - f_min) / abs(f_min):.3e}")
        print(f"{noise}: NPG-BFGS reaches PG-BFGS's final objective at iteration {run.hit} "
              f"of {run.pg.iterations} (ratio {run.ratio:.3f}); final RSE "
              f"PG {100 * np.nan_to_num(run.pg.trace_array('rse')[-1]):.2f}% "
              f"NPG {100 * np.nan_to_num(run.npg.trace_array('rse')[-1]):.2f}%")


if __name__ == "__main__":
    main()
