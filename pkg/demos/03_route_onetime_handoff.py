#!/usr/bin/env python3
"""One-time handoff on the route-construction task.

The model is a greedy nearest-neighbor tour builder; the expert runs 2-opt on
the not-yet-fixed suffix (or exact dynamic programming on small instances).
Handing off at position j freezes the model's first j-1 hops and lets the
expert finish the tour; alpha_j prices earlier handoffs linearly.  Token-level
deferral is meaningless here (one expert hop would pick the same greedy edge),
so this task is the one-time specialist.

A single scorer network reads a 26-dim instance summary (coordinate spread,
edge-length quantiles, rollout confidence sketch, ...) and scores every
candidate position at once; argmax picks the handoff, a threshold on the
never-defer head sweeps the curve.  We compare it against ranking candidates
by the rollout's own softmax confidence.

Losses on curves are reported as percent of tour length over the expert-only
tour, so 0 is "as good as handing everything off immediately".
"""

import numpy as np

from seqdefer import baselines
from seqdefer.evaluation import audc, curve_onetime, pct_improvement
from seqdefer.rejectors import committee_onetime_scores, train_onetime_committee
from seqdefer.surrogates import onetime_realized_all
from seqdefer.tasks import make_task

SEED = 0
N_TRAIN, N_TEST = 300, 100

adapter = make_task("tsp")  # 50 cities, alpha1=0.5
print("task:", adapter.describe())

train, test = adapter.build_dataset(N_TRAIN, N_TEST, SEED)
t = test[0]
realized = onetime_realized_all(t, None)
best = t.candidates.positions[int(np.argmin(realized))]
print(f"\none test instance ({t.instance_id}):")
print(f"  never-defer tour cost : {t.model_full_loss:.3f}")
print(f"  full-handoff cost     : {t.expert_full_loss:.3f} (incl. alpha1)")
print(f"  hindsight-best handoff: position {best} of {t.L + 1}")

recipe = adapter.train_recipe("onetime", SEED)
print(f"\ntraining a committee of {recipe['members']} one-time rejectors "
      f"({recipe['config'].kind} surrogate) ...")
models = train_onetime_committee(train, None, recipe["config"],
                                 recipe["members"], **recipe["arch"])

tf = adapter.curve_transform()  # percent over the raw expert tour
g_model = committee_onetime_scores(models, test)
g_conf = np.stack([baselines.onetime_conf(adapter.conf_kind, t, None,
                                          adapter.conf_kind) for t in test])

rand_audc = baselines.random_audc_analytic(test, loss_transform=tf)
print(f"\nrandom-policy AUDC (analytic): {rand_audc:.2f}")
print(f"{'method':<14} {'AUDC':>9} {'pct improvement':>16}")
for name, g in (("onetime_model", g_model), ("onetime_score", g_conf)):
    curve = curve_onetime(test, g, None, loss_transform=tf, method=name)
    a = audc(curve)
    print(f"{name:<14} {a:9.2f} {pct_improvement(a, rand_audc):15.2f}%")

# what does the argmax pick cost, next to hindsight and the two extremes?
picks = g_model.shape[1] - 1 - np.argmax(g_model[:, ::-1], axis=1)
R = np.stack([onetime_realized_all(t, None) for t in test])
model_pick = R[np.arange(len(test)), picks].mean()
hindsight = R.min(axis=1).mean()
never = np.mean([t.model_full_loss for t in test])
always = np.mean([t.expert_full_loss for t in test])
print(f"\nmean realized tour cost by policy:")
print(f"  hindsight-best handoff : {hindsight:.3f}")
print(f"  trained argmax handoff : {model_pick:.3f}")
print(f"  always defer (pos 1)   : {always:.3f}")
print(f"  never defer  (pos L+1) : {never:.3f}")
print(f"the trained pick recovers "
      f"{100 * (never - model_pick) / (never - hindsight):.0f}% of the gap "
      f"between never-defer and hindsight.")
