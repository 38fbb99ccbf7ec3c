"""Run (or resume) the desk-scale ablation study and print the comparisons.

Stages are cached in the output directory, so interrupting and rerunning
picks up where it stopped.  A cold run takes a few hours on one core.

    python demos/directional_study.py [cache_dir] [workers]
"""

import logging
import sys

from migc.experiments import directional_checks, row, run_study

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

cache = sys.argv[1] if len(sys.argv) > 1 else "artifacts/study"
workers = int(sys.argv[2]) if len(sys.argv) > 2 else 1
results = run_study(cache, workers=workers)

print(f"\n{'variant':<10}{'level':>7}{'ISR':>9}{'mIoU':>9}{'R':>9}")
for variant, rows in results.items():
    for level in (2, 3, 4, "all"):
        r = row(rows, level)
        print(f"{variant:<10}{level!s:>7}{r['instance_success_rate']:>9.4f}{r['miou']:>9.4f}{r['R']:>9.4f}")
print()
for key, (ok, detail) in directional_checks(results).items():
    print(f"{'PASS' if ok else 'FAIL'}  {key}  {detail}")
