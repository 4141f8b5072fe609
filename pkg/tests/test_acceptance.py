"""Acceptance gate: nine end-to-end checks, one test per headline guarantee.

Each test measures the quantity it gates on, asserts the stated tolerance,
enforces a wall-clock budget, and prints a single PASS line (visible under
pytest -s) with the numbers that justify it.  The suite is fully seeded:
every run sees the same traces, worlds, and training draws.

Gate map
  g1  selection-loss identities (rewrite residual, Chow pooling, linear AUDC)
  g2  gamma-weighted surrogates dominate realized losses pointwise
  g3  reverse-mode gradients match central differences
  g4  tabular surrogate minimizers approach the Bayes policies on fixed worlds
  g5  hindsight-optimal curve and heuristic solvers agree with brute force
  g6  weather-analog ordering: token model > one-time model > whole deferral
  g7  random-deferral curve matches its analytic straight line
  g8  route-task grid sweep: trained one-time rejector beats confidence ranking
  g9  CLI pipeline reruns are byte-identical
"""

import itertools
import time

import numpy as np

from conftest import make_random_trace
from seqdefer import baselines
from seqdefer.cli import main
from seqdefer.consistency import (
    bayes_onetime,
    bayes_onetime_by_enumeration,
    bayes_token,
    bayes_token_by_enumeration,
    consistency_gap,
    gap_curve,
    make_fixed_worlds,
)
from seqdefer.core import CandidateSet, derive_rng
from seqdefer.evaluation import (
    DeferralCurve,
    audc,
    curve_onetime,
    curve_token,
    curve_whole,
    pct_improvement,
)
from seqdefer.rejectors import (
    OneTimeRejector,
    TokenRejector,
    committee_onetime_scores,
    committee_token_scores,
    grad_check,
    onetime_batch_loss,
    token_batch_loss,
    train_onetime_committee,
    train_token_committee,
)
from seqdefer.surrogates import (
    PHI_KINDS,
    PSI_KINDS,
    dominance_margin_onetime,
    dominance_margin_token,
    onetime_identity_residual,
)
from seqdefer.tasks import make_task
from seqdefer.tasks.tsp import (
    exact_completion,
    nn_rollout,
    pairwise_distances,
    tour_length,
    two_opt_suffix,
)


def _gate(name: str, detail: str, started: float, budget: float | None = None):
    elapsed = time.perf_counter() - started
    if budget is not None:
        assert elapsed < budget, f"{name} took {elapsed:.1f}s, budget {budget:.0f}s"
    print(f"PASS {name} ({elapsed:.1f}s): {detail}")


# ---------------------------------------------------------------------------
# g1: identities


def test_g1_identities_rewrite_residual_chow_scaling_linear_audc():
    """Rewrite residual <= 1e-9 on 1e4 fuzzed traces; mean pooling == sum
    pooling / L bitwise; trapezoid area of the line (0,10)->(5,2) is 30."""
    started = time.perf_counter()
    rng = derive_rng(1101)
    worst_residual = 0.0
    for i in range(10_000):
        L = int(rng.integers(2, 9))
        t = make_random_trace(rng, L=L, loss_scale=float(rng.uniform(0.5, 4.0)),
                              instance_id=f"g1-{i}")
        for j in t.candidates.positions:
            worst_residual = max(worst_residual,
                                 onetime_identity_residual(t, None, j))
        # scale-equivalence of the two Chow pooling rules, exact in floats:
        # np.mean divides the identical accumulated sum by L
        assert baselines.chow_score("mean", t) == baselines.chow_score("sum", t) / L
    assert worst_residual <= 1e-9, f"worst rewrite residual {worst_residual:.3e}"

    line = DeferralCurve.from_points("line", [0.0, 5.0], [10.0, 2.0])
    area = audc(line)
    assert abs(area - 30.0) <= 1e-9, f"linear AUDC {area!r}"
    _gate("g1 identities",
          f"max rewrite residual {worst_residual:.2e} on 10000 traces, "
          f"chow mean==sum/L exact, linear AUDC {area}",
          started, budget=10.0)


# ---------------------------------------------------------------------------
# g2: dominance


def test_g2_dominance_zero_violations_all_surrogate_kinds():
    """gamma * surrogate >= realized on 1e4 random (l, c, r) samples per
    token kind and 1e4 random (trace, g) samples per one-time kind."""
    started = time.perf_counter()
    rng = derive_rng(1202)
    n = 10_000
    l = rng.uniform(0.0, 5.0, size=n)
    c = rng.uniform(1e-4, 5.0, size=n)
    r = rng.normal(0.0, 2.0, size=n)
    r[::97] = 0.0  # pin the defer-tie boundary into the sample
    worst_token = {}
    for kind in PHI_KINDS:
        margins = np.array([dominance_margin_token(kind, l[i], c[i], r[i])
                            for i in range(n)])
        violations = int(np.sum(margins < 0.0))
        assert violations == 0, f"{kind}: {violations} token dominance violations"
        worst_token[kind] = float(margins.min())

    traces = [make_random_trace(rng, L=5, instance_id=f"g2-{i}") for i in range(n)]
    scores = rng.normal(0.0, 3.0, size=(n, 6))
    worst_onetime = {}
    for kind in PSI_KINDS:
        margins = np.array([dominance_margin_onetime(kind, t, None, g)
                            for t, g in zip(traces, scores)])
        violations = int(np.sum(margins < 0.0))
        assert violations == 0, f"{kind}: {violations} one-time dominance violations"
        worst_onetime[kind] = float(margins.min())

    detail = ", ".join([f"phi:{k} min margin {v:.3e}" for k, v in worst_token.items()]
                       + [f"psi:{k} min margin {v:.3e}" for k, v in worst_onetime.items()])
    _gate("g2 dominance", f"0 violations in 4x{n} samples ({detail})",
          started, budget=10.0)


# ---------------------------------------------------------------------------
# g3: gradients


def test_g3_gradients_match_central_differences():
    """Backward-pass gradients agree with central differences to < 1e-4
    over every parameter, both surrogate families, 20 random batches."""
    started = time.perf_counter()
    worst = 0.0
    for b in range(10):  # token batches: alternate phi kinds and architectures
        rng = derive_rng(1303, b)
        kind = PHI_KINDS[b % 2]
        state_dim = (0, 2)[(b // 2) % 2]
        traces = [make_random_trace(rng, L=int(rng.integers(3, 6)),
                                    instance_id=f"g3t-{b}-{i}")
                  for i in range(4)]
        L = traces[0].L
        traces = [t for t in traces if t.L == L]  # batch needs one length
        model = TokenRejector(4, hidden=(4,), state_dim=state_dim,
                              dropout=0.0, seed=b)
        err = grad_check(
            lambda: token_batch_loss(model, traces, kind, teacher_prob=1.0),
            model.named_params())
        assert err < 1e-4, f"token batch {b} ({kind}): grad error {err:.3e}"
        worst = max(worst, err)
    for b in range(10):  # one-time batches: alternate psi kinds and widths
        rng = derive_rng(1304, b)
        kind = PSI_KINDS[b % 2]
        hidden = ((5,), (4, 3))[(b // 2) % 2]
        L = int(rng.integers(3, 6))
        traces = [make_random_trace(rng, L=L, instance_id=f"g3o-{b}-{i}")
                  for i in range(5)]
        # tanh trunk: smooth everywhere, so central differences are valid at
        # any point (narrow relu layers can die and park pre-activations
        # exactly on the kink, where numeric derivatives are one-sided)
        model = OneTimeRejector(3, L + 1, hidden=hidden, dropout=0.0,
                                activation="tanh", seed=b)
        err = grad_check(
            lambda: onetime_batch_loss(model, traces, None, kind),
            model.named_params())
        assert err < 1e-4, f"one-time batch {b} ({kind}): grad error {err:.3e}"
        worst = max(worst, err)
    _gate("g3 gradients",
          f"worst relative error {worst:.2e} over 20 batches, all parameters",
          started, budget=30.0)


# ---------------------------------------------------------------------------
# g4: finite-world calibration


def test_g4_tabular_minimizers_reach_bayes_on_fixed_worlds():
    """On the three frozen worlds the tabular surrogate minimizer's realized
    risk is within 1% of Bayes at n=1e5, the seed-averaged gap is nonincreasing
    over n in {1e2,1e3,1e4,1e5}, and the Bayes rules equal brute-force policy
    enumeration exactly."""
    started = time.perf_counter()
    worlds = make_fixed_worlds()
    pairs = [(worlds["A"], PHI_KINDS), (worlds["B"], PSI_KINDS),
             (worlds["C"], PHI_KINDS)]
    n_grid = [100, 1_000, 10_000, 100_000]
    details = []
    for world, kinds in pairs:
        for kind in kinds:
            curve = gap_curve(world, kind, n_grid, seeds=range(5))
            mean_gaps = curve["mean_gaps"]
            diffs = np.diff(mean_gaps)
            assert np.all(diffs <= 0.0), \
                f"{world.name}/{kind}: mean gap not nonincreasing: {mean_gaps}"
            final = consistency_gap(world, kind, 100_000, seed=0)
            rel = final["gap"] / final["scale"]
            assert rel < 0.01, \
                f"{world.name}/{kind}: gap {final['gap']:.4g} is {rel:.2%} of scale"
            details.append(f"{world.name}/{kind} gap@1e5 {rel:.2e} "
                           f"curve {np.array2string(mean_gaps, precision=4)}")

    d_a, r_a = bayes_token(worlds["A"])
    d_ae, r_ae = bayes_token_by_enumeration(worlds["A"])
    assert np.array_equal(d_a, d_ae) and r_a == r_ae
    d_c, r_c = bayes_token(worlds["C"])
    d_ce, r_ce = bayes_token_by_enumeration(worlds["C"])
    assert np.array_equal(d_c, d_ce) and r_c == r_ce
    p_b, r_b = bayes_onetime(worlds["B"])
    p_be, r_be = bayes_onetime_by_enumeration(worlds["B"])
    assert np.array_equal(p_b, p_be) and r_b == r_be
    _gate("g4 fixed-world calibration",
          "; ".join(details) + "; bayes==enumeration on all 3 worlds",
          started, budget=300.0)


# ---------------------------------------------------------------------------
# g5: oracle equivalence


def _enumerated_token_optima(trace) -> np.ndarray:
    """Best total loss per defer-budget by trying all 2^L decision masks."""
    losses, costs = trace.step_losses(), trace.step_costs()
    L = len(losses)
    masks = np.array(list(itertools.product((False, True), repeat=L)))
    totals = np.where(masks, costs[None, :], losses[None, :]).sum(axis=1)
    counts = masks.sum(axis=1)
    return np.array([totals[counts == k].min() for k in range(L + 1)])


def test_g5_optimal_curve_and_route_completions_match_brute_force():
    """Token hindsight-optimal curve equals the 2^L enumeration on 100
    instances (L <= 10); on 200 random route instances (n <= 12) the 2-opt
    completion lands between the exact dynamic program and plain greedy."""
    started = time.perf_counter()
    rng = derive_rng(1505)
    worst_diff = 0.0
    for i in range(100):
        L = int(rng.integers(3, 11))
        t = make_random_trace(rng, L=L, loss_scale=2.0, instance_id=f"g5-{i}")
        curve = baselines.optimal_curve([t], view="token")
        assert np.array_equal(curve.deferred, np.arange(L + 1, dtype=float))
        brute = _enumerated_token_optima(t)
        diff = float(np.max(np.abs(curve.losses - brute)))
        assert diff <= 1e-9, f"instance {i}: optimal curve off by {diff:.3e}"
        worst_diff = max(worst_diff, diff)

    sandwich_slack = np.inf
    for i in range(200):
        n = int(rng.integers(5, 13))
        coords = rng.normal(size=(n, 2))
        D = pairwise_distances(coords)
        order = nn_rollout(D)[0]
        greedy_len = tour_length(D, order)
        first_free = int(rng.integers(1, n - 1))
        improved = tour_length(D, two_opt_suffix(D, order, first_free))
        exact = exact_completion(D, order, first_free)
        assert exact - 1e-9 <= improved <= greedy_len + 1e-9, (
            f"instance {i} (n={n}, cut {first_free}): 2-opt {improved:.6f} "
            f"outside [{exact:.6f}, {greedy_len:.6f}]")
        sandwich_slack = min(sandwich_slack, greedy_len - exact)
    _gate("g5 oracle equivalence",
          f"optimal-curve max deviation {worst_diff:.2e} over 100 instances; "
          f"200/200 completions inside [exact, greedy]",
          started, budget=300.0)


# ---------------------------------------------------------------------------
# g6: weather-analog ordering


def test_g6_weather_ordering_token_model_beats_onetime_beats_whole():
    """Across 5 seeds x 100 test instances at task defaults, mean percent
    improvement orders token model > one-time model > best whole-deferral
    baseline, and token model > token confidence, each with a positive mean
    margin holding on at least 4 of 5 seeds."""
    started = time.perf_counter()
    adapter = make_task("mwp")
    per_seed = {"token_model": [], "token_score": [], "onetime_model": [],
                "best_whole": []}
    for seed in range(5):
        train, test = adapter.build_dataset(800, 100, seed)
        rand_audc = baselines.random_audc_analytic(test)
        reroll = adapter.token_reroll(test)

        def pct(curve):
            return pct_improvement(audc(curve), rand_audc)

        rec = adapter.train_recipe("token", seed)
        tok = train_token_committee(train, rec["config"], rec["members"],
                                    **rec["arch"])
        s_model = committee_token_scores(tok, test)
        per_seed["token_model"].append(
            pct(curve_token(test, s_model, mode="reroll", reroll_fn=reroll)))
        conf = baselines.conf_matrix(adapter.conf_kind, test, adapter.conf_kind)
        per_seed["token_score"].append(
            pct(curve_token(test, conf, mode="reroll", reroll_fn=reroll)))

        rec1 = adapter.train_recipe("onetime", seed)
        ots = train_onetime_committee(train, None, rec1["config"],
                                      rec1["members"], **rec1["arch"])
        g = committee_onetime_scores(ots, test)
        per_seed["onetime_model"].append(pct(curve_onetime(test, g, None)))

        whole = [pct(curve_whole(test, baselines.chow_scores("sum", test))),
                 pct(curve_whole(test, baselines.chow_scores("mean", test))),
                 pct(curve_whole(test, baselines.chow_scores("quantile", test,
                                                             0.75)))]
        wmodel, _ = baselines.train_whole_embed(train, seed=seed)
        whole.append(pct(curve_whole(test, baselines.whole_scores(wmodel, test))))
        per_seed["best_whole"].append(max(whole))

    arr = {k: np.array(v) for k, v in per_seed.items()}
    orderings = [("token_model", "onetime_model"),
                 ("onetime_model", "best_whole"),
                 ("token_model", "token_score")]
    margins = {}
    for hi, lo in orderings:
        margin = float(np.mean(arr[hi]) - np.mean(arr[lo]))
        seats = int(np.sum(arr[hi] > arr[lo]))
        assert margin > 0.0, f"{hi} <= {lo}: mean margin {margin:.3f}"
        assert seats >= 4, f"{hi} > {lo} only on {seats}/5 seeds"
        margins[f"{hi}>{lo}"] = (margin, seats)
    detail = ", ".join(f"{k} by {m:.2f} pts ({s}/5 seeds)"
                       for k, (m, s) in margins.items())
    _gate("g6 weather-analog ordering", detail, started, budget=900.0)


# ---------------------------------------------------------------------------
# g7: random-baseline law


def test_g7_random_curve_audc_matches_analytic_line():
    """The Monte-Carlo random-deferral curve's AUDC lands within 2% of the
    straight-line value at 1e4 coin draws per budget, both views."""
    started = time.perf_counter()
    rng = derive_rng(1707)
    traces = [make_random_trace(rng, L=6, loss_scale=3.0, instance_id=f"g7-{i}")
              for i in range(100)]
    rel_errs = {}
    for view in ("whole", "token"):
        emp = audc(baselines.random_curve(traces, seed=7, draws=10_000, view=view))
        ana = baselines.random_audc_analytic(traces, view=view)
        rel = abs(emp - ana) / ana
        assert rel < 0.02, f"{view}: AUDC {emp:.4f} vs analytic {ana:.4f} ({rel:.2%})"
        rel_errs[view] = rel
    _gate("g7 random-baseline law",
          ", ".join(f"{v}: {e:.3%} off analytic" for v, e in rel_errs.items()),
          started)


# ---------------------------------------------------------------------------
# g8: candidate-grid sweep on the route task


def test_g8_route_grid_sweep_model_beats_confidence_at_every_size():
    """On the route task the trained one-time rejector's mean percent
    improvement exceeds the confidence ranking at every candidate-grid size
    in {5, 10, 25, L+1}; mean(std) over 5 seeds reported."""
    started = time.perf_counter()
    adapter = make_task("tsp")  # 50 cities -> L+1 = 50
    sizes = [5, 10, 25, adapter.L + 1]
    from seqdefer.evaluation import j_sweep

    rows = j_sweep(adapter, sizes, seeds=range(5), n_train=300, n_test=100)
    details = []
    for size in sizes:
        def stats(method):
            vals = np.array([r["pct_improvement"] for r in rows
                             if r["size"] == size and r["method"] == method])
            assert vals.shape == (5,)
            return vals

        model, conf = stats("onetime_model"), stats("onetime_score")
        margin = float(model.mean() - conf.mean())
        assert margin > 0.0, (
            f"size {size}: model {model.mean():.2f} <= confidence {conf.mean():.2f}")
        details.append(
            f"m={size}: model {model.mean():.2f}({model.std():.2f}) vs "
            f"conf {conf.mean():.2f}({conf.std():.2f}), +{margin:.2f}")
    _gate("g8 route grid sweep", "; ".join(details), started, budget=1200.0)


# ---------------------------------------------------------------------------
# g9: pipeline determinism


G9_CONFIG = """\
schema = expconfig/v1
task = tsp
task.n_cities = 8
seeds = 0,1
n_train = 20
n_test = 8
alpha1 = 0.5
train.onetime.epochs = 6
train.onetime.members = 2
"""


def test_g9_pipeline_rerun_is_byte_identical(tmp_path):
    """Running gen/trace/train/eval twice from one config yields summary and
    curve CSVs that are equal byte for byte."""
    started = time.perf_counter()
    cfg_path = tmp_path / "exp.cfg"
    cfg_path.write_text(G9_CONFIG)
    outs = [tmp_path / "run-a", tmp_path / "run-b"]
    for out in outs:
        for stage in ("gen", "trace", "train", "eval"):
            code = main([stage, "--config", str(cfg_path), "--out", str(out)])
            assert code == 0, f"{stage} exited {code} in {out.name}"
    names = ["summary.csv", "summary-mean.csv", "curves-seed0.csv",
             "curves-seed1.csv"]
    for name in names:
        a = (outs[0] / name).read_bytes()
        b = (outs[1] / name).read_bytes()
        assert a == b, f"{name} differs between reruns"
    _gate("g9 pipeline determinism",
          f"{len(names)} CSVs byte-identical across independent reruns",
          started)
