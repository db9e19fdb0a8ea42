"""Check Monte Carlo propensities against their closed-form limits.

Usage:
    python3 scripts/run_propensity_check.py [--config configs/propensity_check.yaml]

For each cohort size and queue: the forced-assignment MC estimate of the
queue-conditional treatment probability next to its water-filling limit,
and the realized cumulative treated mass next to its capacity cap.  Both
deviation columns should shrink roughly like 1/sqrt(n).
"""

import argparse
import time

from queuedesign.config import apply_overrides, load_config
from queuedesign.experiments import run_propensity_check


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/propensity_check.yaml")
    ap.add_argument("--seed", type=int, default=None)
    args = ap.parse_args()

    config = apply_overrides(load_config(args.config), seed=args.seed)
    start = time.monotonic()
    rows = run_propensity_check(config)
    elapsed = time.monotonic() - start

    print(f"{'n':>6} {'queue':>5} {'mc pi~':>8} {'limit':>7} {'dev':>8} "
          f"{'mass':>7} {'cap':>7} {'mass dev':>8}")
    for n, k, pi_t, alpha, dev, mass, cap in rows:
        print(f"{n:6d} {k:5d} {pi_t:8.4f} {alpha:7.4f} {dev:8.4f} "
              f"{mass:7.4f} {cap:7.4f} {abs(mass - cap):8.4f}")
    print(f"[{elapsed:.1f}s, seed={config.execution.seed}]")


if __name__ == "__main__":
    main()
