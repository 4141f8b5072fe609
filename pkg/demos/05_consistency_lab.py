#!/usr/bin/env python3
"""Do the convex surrogates actually steer toward the Bayes deferral policy?

The lab works on finite worlds: small enumerable joint distributions over
contexts, per-step losses, and expert costs.  On a finite world we can
compute the exact Bayes policy two independent ways (closed form vs brute
force over every decision table), then fit the *empirical* surrogate
minimizer on n samples and measure how much realized risk it gives away.

The rejector class is tabular - one free score per context/step cell - so
the fit has zero approximation error and the measured gap is pure estimation
error.  If the surrogate is well-calibrated, that gap must vanish as n grows;
if it pointed at the wrong policy, the gap would plateau at a constant.

Worlds:
  A-token    3 contexts x 3 steps, comfortable decision margins
  B-onetime  3 contexts, 4 handoff candidates, clear argmins
  C-audit    margins spread over 3+ decades, so at every n some cells sit
             right at the sampling noise floor - the interesting world
"""

import numpy as np

from seqdefer.consistency import (
    bayes_onetime,
    bayes_onetime_by_enumeration,
    bayes_token,
    bayes_token_by_enumeration,
    bound_audit,
    consistency_gap,
    make_fixed_worlds,
)

worlds = make_fixed_worlds()

# --- Bayes two ways ----------------------------------------------------------
print("Bayes policies, closed form vs exhaustive enumeration:")
for key, solve, enumerate_ in (("A", bayes_token, bayes_token_by_enumeration),
                               ("C", bayes_token, bayes_token_by_enumeration)):
    w = worlds[key]
    d1, r1 = solve(w)
    d2, r2 = enumerate_(w)
    print(f"  {w.name}: risk {r1:.6f}, decision tables "
          f"{'MATCH' if np.array_equal(d1, d2) and r1 == r2 else 'DIFFER'} "
          f"(enumerated {2 ** (w.K * w.L)} tables)")
    assert np.array_equal(d1, d2) and r1 == r2
w = worlds["B"]
p1, r1 = bayes_onetime(w)
p2, r2 = bayes_onetime_by_enumeration(w)
print(f"  {w.name}: risk {r1:.6f}, picks {p1} "
      f"{'MATCH' if np.array_equal(p1, p2) and r1 == r2 else 'DIFFER'} "
      f"(enumerated {w.m ** w.K} policies)")
assert np.array_equal(p1, p2) and r1 == r2

# --- estimation error vs sample size ------------------------------------------
n_grid = [100, 316, 1000, 3162, 10_000, 31_623, 100_000]
print(f"\nmean realized-risk gap over 5 seeds (tabular fits):")
header = "  {:<18}".format("world/kind") + "".join(f"{n:>9}" for n in n_grid)
print(header)
for key, kind in (("A", "logistic"), ("B", "ce"), ("C", "logistic"),
                  ("C", "square")):
    w = worlds[key]
    audit = bound_audit(w, kind, n_grid, seeds=range(5))
    cells = "".join(f"{g:9.2e}" for g in audit["mean_gaps"])
    slope = "flat (already Bayes)" if audit["slope"] is None else \
        f"log-log slope {audit['slope']:.2f}"
    print(f"  {w.name + '/' + kind:<18}{cells}   {slope}")

# --- the headline numbers -----------------------------------------------------
print("\nat n = 1e5, gap as a share of the world's loss scale:")
for key, kind in (("A", "logistic"), ("B", "ce"), ("C", "logistic")):
    w = worlds[key]
    res = consistency_gap(w, kind, 100_000, seed=0)
    share = res["gap"] / res["scale"]
    print(f"  {w.name:<10} {kind:<9} gap {res['gap']:.3e} "
          f"= {100 * share:.4f}% of scale {res['scale']:.3f}")
    assert share < 0.01

print("\nReading the table: worlds A and B hit the Bayes policy from n=100 "
      "on\n(their margins dwarf the sampling noise), while C's spread-out "
      "margins\ndecay like 1/sqrt(n) - the signature of estimation error, "
      "not of a\nmiscalibrated surrogate, which would plateau.")
