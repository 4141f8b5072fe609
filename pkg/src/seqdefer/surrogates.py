"""Deferral losses and their convex surrogates.

Token-level: at each step j a rejector score r_j picks the model (r_j < 0) or
the expert (r_j >= 0, ties defer).  The realized per-step loss is
l_j if kept, c_j if deferred; the sequence loss is the mean over steps.
The surrogate replaces the indicators with a margin function phi:

    l_j * phi(r_j) + c_j * phi(-r_j),   phi in {logistic, square}.

One-time: a score vector g over the candidate handoff grid picks a single
position j = argmax g (ties toward the largest position, i.e. defer later).
The realized loss at j is prefix_loss(j) + handoff_cost(j).  Rewriting the
selection loss in indicator form

    sum_j (c_max - realized_j) * 1[argmax g != j] - (m-1)*c_max + sum_j realized_j

(c_max = max_j realized_j, m = grid size) turns it into a weighted multiclass
0-1 loss with nonnegative weights, which the softmax surrogates bound:

    sum_j w_j * psi(g, j),   psi in {ce, mae}.

Dominance constants: gamma * surrogate >= realized with gamma = 1/ln 2
(logistic, ce), 1 (square), 2 (mae).  For the one-time family the bound is
against the weighted indicator form above, which holds unconditionally; it
transfers to the realized selection loss whenever
c_max > (sum_j realized_j) / (m - 1).
"""

from __future__ import annotations

import math

import numpy as np

from .core import CandidateSet, Trace

PHI_KINDS = ("logistic", "square")
PSI_KINDS = ("ce", "mae")

GAMMA_PHI = {"logistic": 1.0 / math.log(2.0), "square": 1.0}
GAMMA_PSI = {"ce": 1.0 / math.log(2.0), "mae": 2.0}


def _check_finite(name, x):
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} must be finite")


def phi(kind: str, z):
    """Margin penalty: logistic ln(1+e^-z) or square (1-z)^2. Vectorized."""
    z = np.asarray(z, dtype=np.float64)
    _check_finite("phi argument", z)
    if kind == "logistic":
        out = np.logaddexp(0.0, -z)
    elif kind == "square":
        out = (1.0 - z) ** 2
    else:
        raise ValueError(f"unknown phi kind {kind!r}, expected one of {PHI_KINDS}")
    return out if out.ndim else float(out)


def softmax(g) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    m = np.max(g, axis=-1, keepdims=True)
    e = np.exp(g - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(g) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    m = np.max(g, axis=-1, keepdims=True)
    return g - m - np.log(np.sum(np.exp(g - m), axis=-1, keepdims=True))


def psi(kind: str, g, idx: int) -> float:
    """Selection penalty for slot idx (0-based index into g).

    ce: -log softmax(g)[idx]; mae: 1 - softmax(g)[idx].
    """
    g = np.asarray(g, dtype=np.float64)
    _check_finite("psi scores", g)
    if not 0 <= idx < g.shape[-1]:
        raise IndexError(f"slot {idx} outside score vector of length {g.shape[-1]}")
    if kind == "ce":
        return float(-log_softmax(g)[..., idx])
    if kind == "mae":
        return float(1.0 - softmax(g)[..., idx])
    raise ValueError(f"unknown psi kind {kind!r}, expected one of {PSI_KINDS}")


def argmax_last(g) -> int:
    """argmax with ties broken toward the largest index (defer later)."""
    g = np.asarray(g)
    return int(g.shape[-1] - 1 - np.argmax(g[::-1]))


# ---------------------------------------------------------------------------
# token-level


def token_step_realized(l: float, c: float, r: float) -> float:
    """l if the model keeps the token (r < 0), c if it defers (r >= 0)."""
    for name, v in (("l", l), ("c", c), ("r", r)):
        if not np.isfinite(v):
            raise ValueError(f"{name} must be finite, got {v}")
    return c if r >= 0 else l


def token_step_surrogate(kind: str, l: float, c: float, r: float) -> float:
    return float(l * phi(kind, r) + c * phi(kind, -r))


def token_realized(losses, costs, scores) -> float:
    """Mean over steps of the realized keep-or-defer loss."""
    losses, costs, scores = (np.asarray(a, dtype=np.float64) for a in (losses, costs, scores))
    if not (losses.shape == costs.shape == scores.shape):
        raise ValueError("losses, costs, scores must have equal shapes")
    if losses.size == 0:
        raise ValueError("empty sequence")
    _check_finite("token_realized inputs", np.concatenate([losses, costs, scores]))
    defer = scores >= 0
    return float(np.mean(np.where(defer, costs, losses)))


def token_surrogate(kind: str, losses, costs, scores) -> float:
    losses, costs, scores = (np.asarray(a, dtype=np.float64) for a in (losses, costs, scores))
    if not (losses.shape == costs.shape == scores.shape):
        raise ValueError("losses, costs, scores must have equal shapes")
    if losses.size == 0:
        raise ValueError("empty sequence")
    return float(np.mean(losses * phi(kind, scores) + costs * phi(kind, -scores)))


def dominance_margin_token(kind: str, l: float, c: float, r: float) -> float:
    """gamma * surrogate - realized; nonnegative for the module's gamma constants."""
    return GAMMA_PHI[kind] * token_step_surrogate(kind, l, c, r) - token_step_realized(l, c, r)


# ---------------------------------------------------------------------------
# one-time


def _resolve_candidates(trace: Trace, candidates: CandidateSet | None) -> CandidateSet:
    if candidates is None:
        return trace.candidates
    for j in candidates.positions:
        trace.candidates.index_of(j)  # raises IndexError if not a stored candidate
    return candidates


def onetime_realized_all(trace: Trace, candidates: CandidateSet | None = None) -> np.ndarray:
    """Realized selection loss prefix + handoff cost for every candidate position."""
    cand = _resolve_candidates(trace, candidates)
    slots = [trace.candidates.index_of(j) for j in cand.positions]
    return trace.prefix_losses[slots] + trace.onetime_costs[slots]


def onetime_realized(trace: Trace, candidates: CandidateSet | None, j: int) -> float:
    cand = _resolve_candidates(trace, candidates)
    slot = trace.candidates.index_of(j)
    if j not in cand:
        raise IndexError(f"j={j} not in candidate set {cand.positions}")
    return float(trace.prefix_losses[slot] + trace.onetime_costs[slot])


def c_max(trace: Trace, candidates: CandidateSet | None = None) -> float:
    """Largest realized selection loss over the grid (the surrogate's weight anchor)."""
    return float(np.max(onetime_realized_all(trace, candidates)))


def onetime_weights(trace: Trace, candidates: CandidateSet | None = None) -> np.ndarray:
    realized = onetime_realized_all(trace, candidates)
    return np.max(realized) - realized


def onetime_surrogate(kind: str, trace: Trace, candidates: CandidateSet | None, g) -> float:
    """Weighted softmax surrogate sum_j (c_max - realized_j) * psi(g, j)."""
    cand = _resolve_candidates(trace, candidates)
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (len(cand),):
        raise ValueError(f"score vector shape {g.shape} != (|candidates|,) = ({len(cand)},)")
    _check_finite("one-time scores", g)
    w = onetime_weights(trace, cand)
    if kind == "ce":
        pen = -log_softmax(g)
    elif kind == "mae":
        pen = 1.0 - softmax(g)
    else:
        raise ValueError(f"unknown psi kind {kind!r}, expected one of {PSI_KINDS}")
    return float(np.dot(w, pen))


def onetime_identity_residual(trace: Trace, candidates: CandidateSet | None, j: int) -> float:
    """|realized(j) - indicator-form rewrite|; zero up to float roundoff.

    The rewrite expresses the selection loss as a weighted multiclass 0-1 loss
    plus a policy-independent constant:
      sum_k (c_max - realized_k) * 1[j != k] - (m-1)*c_max + sum_k realized_k.
    """
    cand = _resolve_candidates(trace, candidates)
    realized = onetime_realized_all(trace, cand)
    slot = cand.index_of(j)
    cmax = np.max(realized)
    lhs = realized[slot]
    mask = np.ones(len(cand), dtype=bool)
    mask[slot] = False
    rhs = np.sum((cmax - realized)[mask]) - (len(cand) - 1) * cmax + np.sum(realized)
    return float(abs(lhs - rhs))


def onetime_weight_condition(trace: Trace, candidates: CandidateSet | None = None) -> bool:
    """True when the dominance bound transfers to the realized selection loss."""
    realized = onetime_realized_all(trace, candidates)
    m = realized.size
    return bool(np.max(realized) > np.sum(realized) / (m - 1))


def dominance_margin_onetime(kind: str, trace: Trace, candidates: CandidateSet | None, g) -> float:
    """gamma * surrogate - weighted indicator loss at argmax g; always >= 0."""
    cand = _resolve_candidates(trace, candidates)
    g = np.asarray(g, dtype=np.float64)
    w = onetime_weights(trace, cand)
    pick = argmax_last(g)
    indicator_loss = float(np.sum(w) - w[pick])
    return GAMMA_PSI[kind] * onetime_surrogate(kind, trace, cand, g) - indicator_loss
