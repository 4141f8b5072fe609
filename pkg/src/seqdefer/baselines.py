"""Confidence-threshold baselines and reference curves.

Three families:

* Chow-style whole-sequence rules: pool per-token confidence scores (sum,
  mean, or a quantile) and defer the entire instance when the pooled score
  crosses a threshold.
* Per-token / one-time confidence rules: threshold the stored per-step
  uncertainty directly (negative log-probability, MC variance, or per-step
  entropy when the task records it).
* A trained whole-deferral classifier: logistic regression on the instance
  summary vector plus pooled confidence stats, predicting whether the expert
  beats the model on the full sequence.

Also provides the shared random-coin baseline curve and the oracle
(hindsight-optimal) curves used as lower bounds.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .core import CandidateSet, Trace, derive_rng
from .evaluation import DeferralCurve, CurvePoint, full_loss_endpoints, token_loss_arrays
from .surrogates import onetime_realized_all

CHOW_KINDS = ("sum", "mean", "quantile")
CONF_KINDS = ("neg_log_prob", "mc_variance", "entropy")


def entropy_of(dist) -> float:
    """Shannon entropy (nats) of a finite distribution; 0 log 0 = 0."""
    p = np.asarray(dist, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("distribution must be a nonempty vector")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("distribution entries must be finite and nonnegative")
    total = p.sum()
    if not np.isclose(total, 1.0, atol=1e-8):
        raise ValueError(f"distribution sums to {total!r}, not 1")
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def chow_score(kind: str, trace: Trace, q: float | None = None) -> float:
    """Pool the trace's per-token confidence scores into one deferral score."""
    scores = trace.conf_scores()
    if kind == "sum":
        return float(np.sum(scores))
    if kind == "mean":
        return float(np.mean(scores))
    if kind == "quantile":
        if q is None or not (0.0 <= q <= 1.0):
            raise ValueError(f"quantile kind needs q in [0, 1], got {q!r}")
        return float(np.quantile(scores, q))
    raise ValueError(f"unknown chow kind {kind!r}; expected one of {CHOW_KINDS}")


def chow_scores(kind: str, traces, q: float | None = None) -> np.ndarray:
    return np.array([chow_score(kind, t, q) for t in traces], dtype=np.float64)


def tokenwise_conf(kind: str, trace: Trace, task_conf_kind: str | None = None) -> np.ndarray:
    """Per-token uncertainty scores of the requested kind (higher = defer more).

    Tasks store one native confidence kind per step; "entropy" additionally
    requires the task to have recorded per-step predictive entropies.
    """
    if kind not in CONF_KINDS:
        raise ValueError(f"unknown confidence kind {kind!r}; expected one of {CONF_KINDS}")
    if kind == "entropy":
        ents = trace.entropies()
        if ents is None:
            raise ValueError(
                "entropy confidence requested but this trace records no per-step "
                "entropies (scalar-output tasks have no predictive distribution)")
        return ents
    if task_conf_kind is not None and kind != task_conf_kind:
        raise ValueError(
            f"confidence kind {kind!r} not available: this task stores {task_conf_kind!r}")
    return trace.conf_scores()


def conf_matrix(kind: str, traces, task_conf_kind: str | None = None) -> np.ndarray:
    return np.stack([tokenwise_conf(kind, t, task_conf_kind) for t in traces])


def onetime_conf(kind: str, trace: Trace, candidates: CandidateSet | None = None,
                 task_conf_kind: str | None = None) -> np.ndarray:
    """Confidence scores over one-time handoff candidates.

    Head j (a real position) reuses the per-token score at j; the final
    never-defer head gets min(scores) - 1 so the argmax never lands on it and
    the threshold sweep alone decides when to keep the model's completion.
    """
    cand = candidates if candidates is not None else trace.candidates
    per_token = tokenwise_conf(kind, trace, task_conf_kind)
    positions = np.array(cand.positions[:-1], dtype=int)
    at = per_token[positions - 1]
    sentinel = float(np.min(at)) - 1.0
    return np.concatenate([at, [sentinel]])


# ---------------------------------------------------------------------------
# trained whole-sequence deferral classifier


@dataclass(frozen=True)
class WholeEmbed:
    """Standardized logistic scorer over summary + pooled-confidence features."""

    mu: np.ndarray
    sd: np.ndarray
    w: np.ndarray
    b: float

    @staticmethod
    def features(trace: Trace) -> np.ndarray:
        conf = trace.conf_scores()
        pooled = [np.sum(conf), np.mean(conf), np.min(conf), np.max(conf)]
        return np.concatenate([trace.x_summary, np.asarray(pooled)])

    def score(self, trace: Trace) -> float:
        z = (WholeEmbed.features(trace) - self.mu) / self.sd
        return float(z @ self.w + self.b)


def whole_scores(model: WholeEmbed, traces) -> np.ndarray:
    return np.array([model.score(t) for t in traces], dtype=np.float64)


def train_whole_embed(traces, epochs: int = 200, lr: float = 0.5,
                      weight_decay: float = 1e-4, seed: int = 0):
    """Full-batch logistic regression; label = expert beat the model overall.

    The bias starts at the label prior's log-odds, so a zero-epoch (or
    degenerate single-class) fit is exactly the prior-rate scorer.
    """
    traces = list(traces)
    if not traces:
        raise ValueError("no traces to fit")
    X = np.stack([WholeEmbed.features(t) for t in traces])
    y = np.array([1.0 if t.expert_full_loss < t.model_full_loss else 0.0 for t in traces])
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd < 1e-8, 1.0, sd)
    Z = (X - mu) / sd
    n = len(traces)
    p_hat = float(np.clip(np.mean(y), 1.0 / (2 * n), 1.0 - 1.0 / (2 * n)))
    b = float(np.log(p_hat / (1.0 - p_hat)))
    w = np.zeros(X.shape[1])
    log = {"n": n, "label_balance": float(np.mean(y)), "degenerate": False,
           "epochs_run": 0}
    if np.all(y == y[0]):
        warnings.warn("whole-deferral labels are single-class; returning the "
                      "prior-rate scorer", RuntimeWarning)
        log["degenerate"] = True
        return WholeEmbed(mu, sd, w, b), log
    for _ in range(epochs):
        z = Z @ w + b
        p = 1.0 / (1.0 + np.exp(-z))
        gw = Z.T @ (p - y) / n + weight_decay * w
        gb = float(np.mean(p - y))
        w = w - lr * gw
        b = b - lr * gb
        log["epochs_run"] += 1
    z = Z @ w + b
    eps = 1e-12
    p = np.clip(1.0 / (1.0 + np.exp(-z)), eps, 1 - eps)
    log["final_nll"] = float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))
    return WholeEmbed(mu, sd, w, b), log


# ---------------------------------------------------------------------------
# reference curves


def random_curve(traces, seed: int = 0, grid=None, draws: int = 256,
                 view: str = "whole", loss_transform=None) -> DeferralCurve:
    """Monte-Carlo random-deferral baseline.

    view "whole": per instance flip one coin with probability p and hand the
    entire sequence off.  view "token": flip an independent coin per token.
    One curve point per coin probability on the grid.
    """
    traces = list(traces)
    L = traces[0].L
    probs = np.linspace(0.0, 1.0, 21) if grid is None else np.asarray(grid, dtype=np.float64)
    if np.any(probs < 0) or np.any(probs > 1):
        raise ValueError("coin probabilities must lie in [0, 1]")
    if draws < 1:
        raise ValueError("draws must be >= 1")
    if view not in ("whole", "token"):
        raise ValueError(f"unknown view {view!r}")
    rng = derive_rng(seed, 7001)
    model_end, expert_end = full_loss_endpoints(traces, loss_transform)
    records = []
    if view == "whole":
        for p in probs:
            coins = rng.random((draws, len(traces))) < p
            loss = np.where(coins, expert_end[None, :], model_end[None, :])
            records.append(CurvePoint(float(p), float(L * np.mean(coins)),
                                      float(np.mean(loss))))
    else:
        losses, costs = token_loss_arrays(traces)
        tf = loss_transform
        for p in probs:
            coins = rng.random((draws, len(traces), L)) < p
            per = np.sum(np.where(coins, costs[None], losses[None]), axis=2)
            if tf is not None:
                per = np.array([[tf(t, v) for t, v in zip(traces, row)] for row in per])
            records.append(CurvePoint(float(p), float(np.mean(np.sum(coins, axis=2))),
                                      float(np.mean(per))))
    xs = [r.deferred for r in records]
    ys = [r.loss for r in records]
    return DeferralCurve.from_points(f"random@{view}", xs, ys, records)


def random_audc_analytic(traces, view: str = "whole", loss_transform=None) -> float:
    """Exact expectation of the random baseline's AUDC.

    The expected curve is the straight line between the two endpoints (for the
    token view this assumes any loss transform is affine per instance, which
    holds for all transforms shipped here), so the area is L * (y0 + yL) / 2.
    """
    traces = list(traces)
    L = traces[0].L
    if view == "whole":
        model_end, expert_end = full_loss_endpoints(traces, loss_transform)
    elif view == "token":
        losses, costs = token_loss_arrays(traces)
        tf = loss_transform or (lambda t, v: v)
        model_end = np.array([tf(t, s) for t, s in zip(traces, losses.sum(axis=1))])
        expert_end = np.array([tf(t, s) for t, s in zip(traces, costs.sum(axis=1))])
    else:
        raise ValueError(f"unknown view {view!r}")
    return float(L * (np.mean(model_end) + np.mean(expert_end)) / 2.0)


def optimal_curve(traces, view: str = "token", candidates: CandidateSet | None = None,
                  loss_transform=None) -> DeferralCurve:
    """Hindsight-optimal curve from the stored loss tables.

    view "token": for each budget k, defer exactly the k tokens with the
    largest loss-minus-cost margins (separable, hence exactly optimal).
    view "onetime": for each budget k, pick the realized-loss argmin among
    candidates that defer at most k tokens.
    """
    traces = list(traces)
    L = traces[0].L
    tf = loss_transform or (lambda t, v: v)
    records = []
    if view == "token":
        losses, costs = token_loss_arrays(traces)
        margins = np.sort(losses - costs, axis=1)[:, ::-1]
        gains = np.concatenate([np.zeros((len(traces), 1)), np.cumsum(margins, axis=1)],
                               axis=1)
        base = losses.sum(axis=1)
        for k in range(L + 1):
            per = base - gains[:, k]
            per = np.array([tf(t, v) for t, v in zip(traces, per)])
            records.append(CurvePoint(float(k), float(k), float(np.mean(per))))
    elif view == "onetime":
        cand = candidates if candidates is not None else traces[0].candidates
        positions = np.array(cand.positions)
        deferred_of = L - positions + 1
        R = np.stack([onetime_realized_all(t, cand) for t in traces])
        for k in range(L + 1):
            allowed = deferred_of <= k
            if not np.any(allowed):
                continue
            sub = np.where(allowed[None, :], R, np.inf)
            pick = np.argmin(sub, axis=1)
            per = R[np.arange(len(traces)), pick]
            per = np.array([tf(t, v) for t, v in zip(traces, per)])
            records.append(CurvePoint(float(k), float(np.mean(deferred_of[pick])),
                                      float(np.mean(per))))
    else:
        raise ValueError(f"unknown view {view!r}")
    xs = [r.deferred for r in records]
    ys = [r.loss for r in records]
    return DeferralCurve.from_points(f"optimal@{view}", xs, ys, records)
