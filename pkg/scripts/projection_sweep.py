"""RSE of lin-BPDN and blind NPG-BFGS as the number of projections grows.

    python scripts/projection_sweep.py --out results/sweep --projections 30 60 120
"""

import argparse
from pathlib import Path

from polyct import io
from polyct.experiments import projection_sweep


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("results/sweep"))
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--projections", type=int, nargs="+", default=[30, 60, 120])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--max-outer", type=int, default=1500)
    args = ap.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in args.seeds:
        for c in projection_sweep(args.size, args.projections, seed, max_outer=args.max_outer):
            ratio = c.rse["npg_bfgs"] / c.rse["lin_bpdn"]
            rows.append((seed, c.n_angles, c.rse["lin_bpdn"], c.rse["npg_bfgs"], ratio, c.u_lin_bpdn))
            print(f"seed {seed} P={c.n_angles:4d}  lin_bpdn {100 * c.rse['lin_bpdn']:.2f}%  "
                  f"npg_bfgs {100 * c.rse['npg_bfgs']:.2f}%  ratio {ratio:.2f}")
    io.save_table(
        args.out / "sweep.csv",
        ("seed", "n_proj", "rse_lin_bpdn", "rse_npg_bfgs", "ratio", "u_lin_bpdn"),
        rows,
    )


if __name__ == "__main__":
    main()
