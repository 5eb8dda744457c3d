"""Print the finite-difference gradient report for every differentiable
block, loss, and an end-to-end model.

Usage:
    python3 scripts/run_gradcheck.py --seeds 10
"""
import argparse
import sys
import time

from r2aunet.verification import run_gradcheck_suite


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--depth", type=int, default=2)
    ap.add_argument("--size", type=int, default=16)
    args = ap.parse_args()

    start = time.monotonic()
    failed = 0
    for seed in range(args.seeds):
        for res in run_gradcheck_suite(seed=seed, depth=args.depth,
                                       size=args.size):
            status = "PASS" if res.passed else "FAIL"
            print(f"seed {seed:2d}  {res.name:28s} "
                  f"max_rel_err {res.max_rel_error:.3e}  "
                  f"(tol {res.tolerance:.0e})  {status}")
            failed += not res.passed
    print(f"\n{args.seeds} seeds in {time.monotonic() - start:.1f}s, "
          f"{failed} failures")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
