"""Total variation between the exact n-step law and the stationary law.

Prints TV(law of Z_n from 0, pi) for a constant-environment config and writes
the curve as CSV (columns n, tv).

    python3 scripts/stationary_convergence.py cfg-bern --K 40 --steps 60
"""

import argparse
import csv
import sys

import numpy as np

from mbpire import oracle
from mbpire.config import bundled, load_config


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config", nargs="?", default="cfg-bern")
    ap.add_argument("--K", type=int, default=40)
    ap.add_argument("--steps", type=int, default=60)
    ap.add_argument("--csv", default=None)
    args = ap.parse_args()
    cfg = load_config(bundled(args.config))
    if not cfg.env.is_deterministic:
        print("needs a constant environment; use the pi experiment for random ones", file=sys.stderr)
        return 2
    pt = oracle.stationary_pi(cfg.tables, [0], args.K)
    k = oracle.build_quenched_kernel(cfg.tables, 0, 0, args.K).P
    mu = np.zeros(k.shape[0])
    mu[0] = 1.0
    rows = []
    for n in range(args.steps + 1):
        rows.append((n, oracle.tv(mu, pt.pi)))
        mu = mu @ k
    print(f"pi(0) = {pt.pi_zero:.15f}  error bound {pt.error_bound:.2e}  ({pt.iterations} iterations)")
    for n, d in rows[:: max(1, args.steps // 12)]:
        print(f"n = {n:4d}  TV = {d:.3e}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "tv"])
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
