"""Cost of the proposed bidding against the three benchmarks on the desk scenario.

Prints the comparison table, then the running cost of each strategy at a few
points in the day.  The bounds-only benchmark (b3) spends little early on,
when it can defer almost everything, and pays for it later.
"""

import sys

import numpy as np

from evbid import harness, scenario

name = sys.argv[1] if len(sys.argv) > 1 else "paper-desk"
sc = scenario.bundled(name)
runs = harness.compare(sc)

print(f"{'algorithm':10s} {'total':>12s} {'vs b1':>8s} {'unit':>8s}")
for algo, total, rel, unit in harness.comparison_table(runs):
    print(f"{algo:10s} {total:12.1f} {rel:8.1%} {unit:8.3f}")

s = runs["online"].summary
print(f"\ncompletion {s.completion_rate:.3f}, delay violations {s.delay_violations}")
print(f"time-average gap to b1 {s.realized_gap:.3f} (bound {s.gap_bound:.4g})")

T = sc.params.horizon
cum = {k: np.cumsum(r.costs.sum(axis=1)) for k, r in runs.items()}
print("\nrunning cost")
print("slot  " + "".join(f"{k:>11s}" for k in cum))
for t in np.linspace(T // 8, T - 1, 8).astype(int):
    print(f"{t:4d}  " + "".join(f"{cum[k][t]:11.1f}" for k in cum))
below = np.nonzero(cum["b3"] < cum["b1"])[0]
if below.size:
    print(f"\nb3 runs below b1 for {below.size} slots (last at slot {below[-1]})")
