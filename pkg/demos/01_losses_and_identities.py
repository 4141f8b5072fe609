#!/usr/bin/env python3
"""Walk through the two deferral losses and the algebra the library leans on.

A deferral trace stores, for each step j, the model's loss l_j and the expert's
cost c_j (expert error plus a per-token price).  Two policies act on it:

  token-level   defer exactly the steps whose score r_j >= 0
  one-time      pick one handoff position j; the model writes tokens < j,
                the expert finishes (position L+1 means never defer)

This script builds a tiny hand-made trace, prints every quantity, and checks
the three identities everything downstream relies on:

  1. the one-time selection loss rewrites as a weighted multiclass 0-1 loss
     plus a policy-independent constant (residual ~ 1e-16),
  2. gamma-weighted convex surrogates sit above the realized losses pointwise,
  3. the trapezoid area of a straight deferral curve is base * mean height.
"""

import numpy as np

from seqdefer.core import CandidateSet, StepRecord, Trace, derive_rng
from seqdefer.evaluation import DeferralCurve, audc
from seqdefer.surrogates import (
    GAMMA_PHI,
    GAMMA_PSI,
    PHI_KINDS,
    PSI_KINDS,
    dominance_margin_onetime,
    dominance_margin_token,
    onetime_identity_residual,
    onetime_realized_all,
    token_realized,
    token_surrogate,
)


def make_explicit_trace(losses, costs):
    """Build a trace from hand-picked per-step losses/costs; the prefix and
    handoff tables telescope from the same arrays, so nothing is inconsistent."""
    losses = np.asarray(losses, dtype=np.float64)
    costs = np.asarray(costs, dtype=np.float64)
    L = len(losses)
    steps = tuple(
        StepRecord(j=j + 1, model_pred=0.0, expert_pred=0.0,
                   model_loss=float(losses[j]), expert_cost=float(costs[j]),
                   conf_score=1.0, features=np.array([losses[j], costs[j]]))
        for j in range(L)
    )
    cum = np.concatenate([[0.0], np.cumsum(losses)])
    suffix = np.concatenate([np.cumsum(costs[::-1])[::-1], [0.0]])
    return Trace(instance_id="demo", x_summary=np.zeros(2), steps=steps,
                 candidates=CandidateSet.full(L), prefix_losses=cum[:L + 1],
                 onetime_costs=suffix, expert_full_loss=float(suffix[0]),
                 model_full_loss=float(cum[L]))

# --- a five-step trace with a visible "model goes off the rails" pattern ----
losses = [0.05, 0.10, 0.80, 1.20, 1.50]   # model error grows with position
costs = [0.40, 0.40, 0.40, 0.40, 0.40]    # expert is steady but not free
trace = make_explicit_trace(losses, costs)
L = trace.L

print("per-step model losses :", np.round(trace.step_losses(), 3))
print("per-step expert costs :", np.round(trace.step_costs(), 3))

# --- one-time view: realized loss of every candidate handoff ----------------
realized = onetime_realized_all(trace, None)
print("\nhandoff position      :", trace.candidates.positions)
print("realized selection    :", np.round(realized, 3))
best = trace.candidates.positions[int(np.argmin(realized))]
print(f"hindsight-best handoff: position {best} "
      f"(defer from step {best} onward)")

# identity 1: indicator rewrite, checked at every candidate
residuals = [onetime_identity_residual(trace, None, j)
             for j in trace.candidates.positions]
print(f"rewrite residual      : max {max(residuals):.2e}  (pure float noise)")
assert max(residuals) < 1e-9

# --- token view: realized loss and surrogate under a score vector -----------
scores = np.array([-1.0, -0.5, 0.2, 0.8, 1.5])  # defer the last three steps
real = token_realized(losses, costs, scores)
print("\ntoken scores          :", scores)
print(f"realized (mean/step)  : {real:.4f}")
for kind in PHI_KINDS:
    sur = token_surrogate(kind, losses, costs, scores)
    print(f"  {kind:<8} surrogate {sur:.4f}  gamma {GAMMA_PHI[kind]:.4f}  "
          f"gamma*surrogate {GAMMA_PHI[kind] * sur:.4f}  >= realized")
    assert GAMMA_PHI[kind] * sur >= real

# identity 2 fuzzed: dominance margins never go negative
rng = derive_rng(42)
worst_tok = np.inf
for _ in range(2000):
    l, c, r = rng.uniform(0, 3), rng.uniform(1e-3, 3), rng.normal(0, 2)
    for kind in PHI_KINDS:
        worst_tok = min(worst_tok, dominance_margin_token(kind, l, c, r))
worst_ot = np.inf
for _ in range(500):
    t = make_explicit_trace(rng.uniform(0, 2, size=4),
                            rng.uniform(0.1, 2, size=4))
    g = rng.normal(0, 3, size=5)
    for kind in PSI_KINDS:
        worst_ot = min(worst_ot, dominance_margin_onetime(kind, t, None, g))
print(f"\nfuzzed dominance margins: token min {worst_tok:.4e}, "
      f"one-time min {worst_ot:.4e}  (both >= 0)")
print(f"gamma constants: phi {dict(GAMMA_PHI)}  psi {dict(GAMMA_PSI)}")
assert worst_tok >= 0 and worst_ot >= 0

# identity 3: a linear curve's area is just the trapezoid
line = DeferralCurve.from_points("line", [0.0, float(L)], [2.0, 0.5])
print(f"\nlinear curve (0,2.0)->({L},0.5): AUDC {audc(line):.4f} "
      f"= {L} * (2.0 + 0.5) / 2")
assert abs(audc(line) - L * 1.25) < 1e-12

# --- restricting the candidate grid -----------------------------------------
small = CandidateSet.uniform_grid(L, 3)
print(f"\nuniform 3-point grid on L={L}: positions {small.positions}")
print("realized on that grid :", np.round(onetime_realized_all(trace, small), 3))
print("\nAll identities hold.")
