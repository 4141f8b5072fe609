"""Deferral curves, AUDC, and experiment summaries.

A deferral curve plots mean system loss against mean deferred tokens as a
decision threshold sweeps over a method's scores.  System loss is the realized
loss stored in traces (deferral prices included), so every curve passes
through the pinned endpoints (0, mean model-only loss) and (L, mean
expert-only loss).  Tasks may supply a per-instance loss transform (e.g. the
TSP percent-increase metric) applied before pooling.

AUDC = trapezoidal area under the curve after sorting by deferred count and
averaging duplicate x values; lower is better.  pct_improvement compares a
method's AUDC against the random-coin baseline's.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .core import CandidateSet, Trace
from .rejectors import onetime_scores, train_onetime_rejector


@dataclass(frozen=True)
class CurvePoint:
    threshold: float | str  # reported tau, or "pinned" for appended endpoints
    deferred: float
    loss: float


@dataclass(frozen=True)
class DeferralCurve:
    """Sorted (deferred, loss) points with duplicate x merged by mean loss."""

    method: str
    deferred: np.ndarray
    losses: np.ndarray
    records: tuple[CurvePoint, ...] = field(default=())

    @staticmethod
    def from_points(method: str, xs, ys, records=()) -> "DeferralCurve":
        xs = np.asarray(xs, dtype=np.float64)
        ys = np.asarray(ys, dtype=np.float64)
        if xs.shape != ys.shape or xs.ndim != 1 or xs.size == 0:
            raise ValueError("curve needs matching 1-D point arrays")
        if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
            raise ValueError("curve points must be finite")
        order = np.argsort(xs, kind="stable")
        xs, ys = xs[order], ys[order]
        ux, inverse = np.unique(xs, return_inverse=True)
        uy = np.zeros_like(ux)
        counts = np.zeros_like(ux)
        np.add.at(uy, inverse, ys)
        np.add.at(counts, inverse, 1.0)
        uy = uy / counts
        merged = DeferralCurve(method, ux, uy, tuple(records))
        merged.deferred.setflags(write=False)
        merged.losses.setflags(write=False)
        return merged


def audc(curve: DeferralCurve) -> float:
    """Trapezoidal area under the deferral curve; lower is better."""
    if curve.deferred.size < 2 or curve.deferred[-1] == curve.deferred[0]:
        raise ValueError(f"degenerate curve {curve.method!r}: no deferred-count span")
    trapezoid = getattr(np, "trapezoid", None) or np.trapz
    return float(trapezoid(curve.losses, curve.deferred))


def pct_improvement(audc_method: float, audc_random: float) -> float:
    if audc_random == 0.0:
        raise ZeroDivisionError("random baseline AUDC is zero")
    return 100.0 * (audc_random - audc_method) / audc_random


def default_thresholds(scores) -> np.ndarray:
    """Sorted distinct observed scores plus -inf/+inf sentinels."""
    flat = np.asarray(scores, dtype=np.float64).ravel()
    if flat.size == 0:
        raise ValueError("no scores to build a threshold grid from")
    if not np.all(np.isfinite(flat)):
        raise ValueError("scores must be finite")
    return np.concatenate([[-np.inf], np.unique(flat), [np.inf]])


def _identity_transform(trace: Trace, value):
    return value


def full_loss_endpoints(traces, loss_transform=None):
    """Per-instance transformed (model-only, expert-only) system losses."""
    tf = loss_transform or _identity_transform
    model = np.array([tf(t, t.model_full_loss) for t in traces], dtype=np.float64)
    expert = np.array([tf(t, t.expert_full_loss) for t in traces], dtype=np.float64)
    return model, expert


def _common_L(traces) -> int:
    Ls = {t.L for t in traces}
    if len(Ls) != 1:
        raise ValueError(f"traces mix sequence lengths {sorted(Ls)}")
    return Ls.pop()


def token_loss_arrays(traces):
    losses = np.stack([t.step_losses() for t in traces])
    costs = np.stack([t.step_costs() for t in traces])
    return losses, costs


def curve_token(traces, scores, thresholds=None, mode: str = "static",
                reroll_fn=None, loss_transform=None, method: str = "token") -> DeferralCurve:
    """Threshold sweep over per-token scores; defer token j iff score_j >= tau.

    mode "static" sums the stored per-step losses/costs under each decision
    mask; mode "reroll" delegates to reroll_fn(mask_matrix) -> per-instance
    losses, letting autoregressive tasks re-predict after expert substitutions.
    The curve method label carries the mode.
    """
    traces = list(traces)
    L = _common_L(traces)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (len(traces), L):
        raise ValueError(f"scores shape {scores.shape} != (n_traces, L) = ({len(traces)}, {L})")
    if mode not in ("static", "reroll"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "reroll" and reroll_fn is None:
        raise ValueError("reroll mode needs a reroll_fn")
    tf = loss_transform or _identity_transform
    taus = default_thresholds(scores) if thresholds is None else np.asarray(thresholds)
    losses, costs = token_loss_arrays(traces)
    model_end, expert_end = full_loss_endpoints(traces, loss_transform)
    records = []
    for tau in taus:
        mask = scores >= tau
        if mode == "static":
            per = np.sum(np.where(mask, costs, losses), axis=1)
        else:
            per = np.asarray(reroll_fn(mask), dtype=np.float64)
        per = np.array([tf(t, v) for t, v in zip(traces, per)])
        records.append(CurvePoint(float(tau), float(np.mean(mask.sum(axis=1))),
                                  float(np.mean(per))))
    records.append(CurvePoint("pinned", 0.0, float(np.mean(model_end))))
    records.append(CurvePoint("pinned", float(L), float(np.mean(expert_end))))
    xs = [r.deferred for r in records]
    ys = [r.loss for r in records]
    return DeferralCurve.from_points(f"{method}@{mode}", xs, ys, records)


def onetime_loss_matrix(traces, candidates: CandidateSet | None = None,
                        loss_transform=None) -> np.ndarray:
    from .surrogates import onetime_realized_all

    tf = loss_transform or _identity_transform
    rows = []
    for t in traces:
        realized = onetime_realized_all(t, candidates)
        rows.append([tf(t, v) for v in realized])
    return np.asarray(rows, dtype=np.float64)


def curve_onetime(traces, g, candidates: CandidateSet | None = None, thresholds=None,
                  loss_transform=None, method: str = "onetime") -> DeferralCurve:
    """Gate-then-argmax policy: keep everything while the no-defer head clears
    tau, otherwise hand off at the argmax candidate (ties toward later)."""
    traces = list(traces)
    cand = candidates if candidates is not None else traces[0].candidates
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (len(traces), len(cand)):
        raise ValueError(f"score shape {g.shape} != ({len(traces)}, {len(cand)})")
    L = _common_L(traces)
    R = onetime_loss_matrix(traces, cand, loss_transform)
    model_end, expert_end = full_loss_endpoints(traces, loss_transform)
    gate = g[:, -1]  # the L+1 head is always the last candidate slot
    taus = default_thresholds(gate) if thresholds is None else np.asarray(thresholds)
    m = len(cand)
    argmax_later = m - 1 - np.argmax(g[:, ::-1], axis=1)
    positions = np.array(cand.positions)
    rows = np.arange(len(traces))
    records = []
    for tau in taus:
        pick = np.where(gate > tau, m - 1, argmax_later)
        deferred = L - positions[pick] + 1
        per = R[rows, pick]
        records.append(CurvePoint(float(tau), float(np.mean(deferred)),
                                  float(np.mean(per))))
    records.append(CurvePoint("pinned", 0.0, float(np.mean(model_end))))
    records.append(CurvePoint("pinned", float(L), float(np.mean(expert_end))))
    xs = [r.deferred for r in records]
    ys = [r.loss for r in records]
    return DeferralCurve.from_points(method, xs, ys, records)


def curve_whole(traces, scores, thresholds=None, loss_transform=None,
                method: str = "whole") -> DeferralCurve:
    """All-or-nothing deferral: hand the whole instance off iff score >= tau."""
    traces = list(traces)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (len(traces),):
        raise ValueError(f"whole-deferral scores must be (n_traces,), got {scores.shape}")
    L = _common_L(traces)
    model_end, expert_end = full_loss_endpoints(traces, loss_transform)
    taus = default_thresholds(scores) if thresholds is None else np.asarray(thresholds)
    records = []
    for tau in taus:
        defer = scores >= tau
        per = np.where(defer, expert_end, model_end)
        records.append(CurvePoint(float(tau), float(L * np.mean(defer)),
                                  float(np.mean(per))))
    records.append(CurvePoint("pinned", 0.0, float(np.mean(model_end))))
    records.append(CurvePoint("pinned", float(L), float(np.mean(expert_end))))
    xs = [r.deferred for r in records]
    ys = [r.loss for r in records]
    return DeferralCurve.from_points(method, xs, ys, records)


# ---------------------------------------------------------------------------
# sweeps


def j_sweep(adapter, sizes, seeds, n_train: int, n_test: int,
            train_config=None, score_kind: str | None = None) -> list[dict]:
    """Candidate-grid-size sweep: one-time model vs one-time confidence baseline.

    Builds full-grid traces once per seed and restricts the candidate view per
    size.  With train_config=None the adapter's tuned recipe is used (committee
    of rejectors, scores averaged); an explicit config trains a single model.
    Returns one row per (size, seed, method) with audc and pct columns.
    """
    from . import baselines
    from .rejectors import committee_onetime_scores, train_onetime_committee

    sizes = [int(s) for s in sizes]
    if any(s < 2 for s in sizes):
        raise ValueError("grid sizes must be >= 2")
    rows = []
    for seed in seeds:
        train, test = adapter.build_dataset(n_train, n_test, seed)
        tf = adapter.curve_transform()
        rand_audc = baselines.random_audc_analytic(test, loss_transform=tf)
        for size in sizes:
            cand = CandidateSet.uniform_grid(adapter.L, size)
            if train_config is None:
                recipe = adapter.train_recipe("onetime", seed)
                models = train_onetime_committee(train, cand, recipe["config"],
                                                 recipe["members"], **recipe["arch"])
            else:
                cfg = train_config.__class__(**{**train_config.__dict__, "seed": seed})
                models = [train_onetime_rejector(train, cand, cfg)[0]]
            g_model = committee_onetime_scores(models, test)
            g_conf = np.stack([
                baselines.onetime_conf(score_kind or adapter.conf_kind, t, cand)
                for t in test
            ])
            for name, g in (("onetime_model", g_model), ("onetime_score", g_conf)):
                curve = curve_onetime(test, g, cand, loss_transform=tf,
                                      method=f"{name}@m{size}")
                a = audc(curve)
                rows.append({"size": size, "seed": seed, "method": name,
                             "audc": a, "pct_improvement": pct_improvement(a, rand_audc)})
    return rows


def alpha_sweep(make_adapter, alphas, train_config, seed: int, n_train: int,
                n_test: int) -> list[dict]:
    """Deferral-price sweep: rebuild traces, retrain, and report the operating
    point the trained one-time model picks (mean deferred tokens at argmax)."""
    from . import baselines

    rows = []
    for a1 in alphas:
        if a1 < 0:
            raise ValueError("alpha1 must be >= 0")
        adapter = make_adapter(float(a1))
        train, test = adapter.build_dataset(n_train, n_test, seed)
        tf = adapter.curve_transform()
        if train_config is None:
            from .rejectors import committee_onetime_scores, train_onetime_committee

            recipe = adapter.train_recipe("onetime", seed)
            models = train_onetime_committee(train, None, recipe["config"],
                                             recipe["members"], **recipe["arch"])
            g = committee_onetime_scores(models, test)
        else:
            cfg = train_config.__class__(**{**train_config.__dict__, "seed": seed})
            model, _ = train_onetime_rejector(train, None, cfg)
            g = onetime_scores(model, test)
        cand = test[0].candidates
        positions = np.array(cand.positions)
        pick = g.shape[1] - 1 - np.argmax(g[:, ::-1], axis=1)
        deferred = (test[0].L - positions[pick] + 1).astype(float)
        curve = curve_onetime(test, g, None, loss_transform=tf, method="onetime_model")
        a = audc(curve)
        rand_audc = baselines.random_audc_analytic(test, loss_transform=tf)
        rows.append({"alpha1": float(a1), "audc": a,
                     "pct_improvement": pct_improvement(a, rand_audc),
                     "mean_deferred_at_argmax": float(np.mean(deferred))})
    return rows


# ---------------------------------------------------------------------------
# artifact writers (all deterministic byte-for-byte given equal inputs)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_curve_csv(path, curves, config_hash: str) -> None:
    with open(path, "w") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        fh.write("method,threshold,deferred_count,loss\n")
        for curve in curves:
            for rec in curve.records:
                fh.write(f"{curve.method},{_fmt(rec.threshold)},"
                         f"{_fmt(rec.deferred)},{_fmt(rec.loss)}\n")


def write_summary_csv(path, rows, config_hash: str) -> None:
    with open(path, "w") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        fh.write("method,audc,pct_improvement,seed\n")
        for r in rows:
            fh.write(f"{r['method']},{_fmt(r['audc'])},"
                     f"{_fmt(r['pct_improvement'])},{r['seed']}\n")


def content_hash_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def content_hash_file(path) -> str:
    with open(path, "rb") as fh:
        return content_hash_bytes(fh.read())


def write_manifest(path, config_hash: str, seeds, inputs: dict, extra: dict | None = None):
    doc = {"config_hash": config_hash, "seeds": list(seeds), "inputs": dict(inputs)}
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")
