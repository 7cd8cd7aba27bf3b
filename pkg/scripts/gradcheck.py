#!/usr/bin/env python3
"""Finite-difference check of the full ELBO gradient on a small two-layer model."""

import argparse
import sys
import time

from itdgp.model import gradcheck_toy


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--step", type=float, default=1e-5)
    ap.add_argument("--tol", type=float, default=1e-3)
    args = ap.parse_args(argv)
    worst = 0.0
    for s in args.seeds:
        t = time.perf_counter()
        err, n = gradcheck_toy(s, args.step)
        worst = max(worst, err)
        print(f"seed {s}: max relative error {err:.3e} over {n} coordinates ({time.perf_counter() - t:.1f} s)")
    ok = worst <= args.tol
    print(f"{'PASS' if ok else 'FAIL'}: worst {worst:.3e} (tolerance {args.tol:g})")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
