"""Finite-world lab: brute-force checks that surrogate minimizers reach Bayes.

A finite world is a fully enumerable joint distribution over a handful of
contexts and per-step loss/cost outcomes (token view) or realized one-time
loss vectors (one-time view).  Bayes-optimal policies and their risks are
computable in closed form, exhaustive policy enumeration is feasible, and the
empirical surrogate minimizer over a tabular rejector (one free score per
context/step cell) is available in closed form too — so the realized-risk gap
to Bayes can be measured exactly, with the only error source being the n
sampled draws.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np

from .core import derive_rng
from .surrogates import argmax_last

WORLD_SCHEMA = "world/v1"
SCORE_CLAMP = 50.0


# ---------------------------------------------------------------------------
# worlds


@dataclass(frozen=True)
class FiniteTokenWorld:
    """Per-context, per-step finite distributions over (loss, cost) pairs.

    outcome_probs[k][j] is a distribution over outcome indices; losses/costs
    give the corresponding values.  Costs must stay >= cost_floor > 0.
    """

    name: str
    ctx_probs: np.ndarray             # (K,)
    outcome_probs: tuple              # [k][j] -> (M_kj,)
    losses: tuple                     # [k][j] -> (M_kj,)
    costs: tuple                      # [k][j] -> (M_kj,)

    def __post_init__(self):
        p = np.asarray(self.ctx_probs, dtype=np.float64)
        if not np.isclose(p.sum(), 1.0, atol=1e-9) or np.any(p < 0):
            raise ValueError("context probabilities must form a distribution")
        for k in range(self.K):
            if len(self.outcome_probs[k]) != self.L:
                raise ValueError("ragged step tables")
            for j in range(self.L):
                q = np.asarray(self.outcome_probs[k][j])
                if not np.isclose(q.sum(), 1.0, atol=1e-9) or np.any(q < 0):
                    raise ValueError(f"outcome probs at ctx {k} step {j} not a distribution")
                if np.any(np.asarray(self.costs[k][j]) <= 0):
                    raise ValueError("costs must be strictly positive")
                if np.any(np.asarray(self.losses[k][j]) < 0):
                    raise ValueError("losses must be nonnegative")

    @property
    def K(self) -> int:
        return len(self.ctx_probs)

    @property
    def L(self) -> int:
        return len(self.outcome_probs[0])

    def mean_losses(self) -> np.ndarray:
        out = np.empty((self.K, self.L))
        for k in range(self.K):
            for j in range(self.L):
                out[k, j] = float(np.dot(self.outcome_probs[k][j], self.losses[k][j]))
        return out

    def mean_costs(self) -> np.ndarray:
        out = np.empty((self.K, self.L))
        for k in range(self.K):
            for j in range(self.L):
                out[k, j] = float(np.dot(self.outcome_probs[k][j], self.costs[k][j]))
        return out

    def margins(self) -> np.ndarray:
        return np.abs(self.mean_losses() - self.mean_costs())

    def scale(self) -> float:
        """Average per-step loss + cost magnitude, for tolerance normalization."""
        El, Ec = self.mean_losses(), self.mean_costs()
        return float(self.ctx_probs @ np.mean(El + Ec, axis=1))

    def degenerate_cells(self, tol: float = 1e-12) -> list:
        El, Ec = self.mean_losses(), self.mean_costs()
        return [(k, j) for k in range(self.K) for j in range(self.L)
                if abs(El[k, j] - Ec[k, j]) <= tol]

    def sample(self, n: int, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        ctx = rng.choice(self.K, size=n, p=np.asarray(self.ctx_probs))
        losses = np.empty((n, self.L))
        costs = np.empty((n, self.L))
        for k in range(self.K):
            idx = np.flatnonzero(ctx == k)
            if idx.size == 0:
                continue
            for j in range(self.L):
                picks = rng.choice(len(self.outcome_probs[k][j]), size=idx.size,
                                   p=np.asarray(self.outcome_probs[k][j]))
                losses[idx, j] = np.asarray(self.losses[k][j])[picks]
                costs[idx, j] = np.asarray(self.costs[k][j])[picks]
        return ctx, losses, costs


@dataclass(frozen=True)
class FiniteOneTimeWorld:
    """Per-context finite distributions over realized one-time loss vectors.

    realized[k] has shape (M_k, m): each row is the realized system loss for
    handing off at each candidate (the last slot is never-defer).
    """

    name: str
    ctx_probs: np.ndarray
    vector_probs: tuple               # [k] -> (M_k,)
    realized: tuple                   # [k] -> (M_k, m)

    def __post_init__(self):
        p = np.asarray(self.ctx_probs, dtype=np.float64)
        if not np.isclose(p.sum(), 1.0, atol=1e-9) or np.any(p < 0):
            raise ValueError("context probabilities must form a distribution")
        m = self.m
        for k in range(self.K):
            q = np.asarray(self.vector_probs[k])
            R = np.asarray(self.realized[k])
            if not np.isclose(q.sum(), 1.0, atol=1e-9) or np.any(q < 0):
                raise ValueError(f"vector probs at ctx {k} not a distribution")
            if R.ndim != 2 or R.shape != (len(q), m):
                raise ValueError("realized tables must be (M_k, m)")
            if np.any(R < 0):
                raise ValueError("realized losses must be nonnegative")

    @property
    def K(self) -> int:
        return len(self.ctx_probs)

    @property
    def m(self) -> int:
        return np.asarray(self.realized[0]).shape[1]

    def mean_realized(self) -> np.ndarray:
        out = np.empty((self.K, self.m))
        for k in range(self.K):
            out[k] = np.asarray(self.vector_probs[k]) @ np.asarray(self.realized[k])
        return out

    def scale(self) -> float:
        return float(self.ctx_probs @ np.mean(self.mean_realized(), axis=1))

    def degenerate_cells(self, tol: float = 1e-12) -> list:
        out = []
        for k, row in enumerate(self.mean_realized()):
            best = np.min(row)
            if np.sum(np.abs(row - best) <= tol) > 1:
                out.append(k)
        return out

    def sample(self, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
        ctx = rng.choice(self.K, size=n, p=np.asarray(self.ctx_probs))
        R = np.empty((n, self.m))
        for k in range(self.K):
            idx = np.flatnonzero(ctx == k)
            if idx.size == 0:
                continue
            picks = rng.choice(len(self.vector_probs[k]), size=idx.size,
                               p=np.asarray(self.vector_probs[k]))
            R[idx] = np.asarray(self.realized[k])[picks]
        return ctx, R


# ---------------------------------------------------------------------------
# Bayes oracles and exhaustive enumeration


def token_policy_risk(world: FiniteTokenWorld, decisions: np.ndarray) -> float:
    """Exact realized token-deferral risk of a (K, L) boolean decision table."""
    El, Ec = world.mean_losses(), world.mean_costs()
    per_ctx = np.mean(np.where(decisions, Ec, El), axis=1)
    return float(np.asarray(world.ctx_probs) @ per_ctx)


def bayes_token(world: FiniteTokenWorld):
    """Defer wherever the expected cost does not exceed the expected loss."""
    El, Ec = world.mean_losses(), world.mean_costs()
    decisions = Ec <= El
    return decisions, token_policy_risk(world, decisions)


def bayes_token_by_enumeration(world: FiniteTokenWorld):
    cells = world.K * world.L
    if cells > 16:
        raise ValueError(f"enumeration over 2^{cells} policies is not practical")
    best, best_d = np.inf, None
    for bits in itertools.product([False, True], repeat=cells):
        d = np.array(bits).reshape(world.K, world.L)
        risk = token_policy_risk(world, d)
        if risk < best:
            best, best_d = risk, d
    return best_d, best


def onetime_policy_risk(world: FiniteOneTimeWorld, picks: np.ndarray) -> float:
    ER = world.mean_realized()
    per_ctx = ER[np.arange(world.K), picks]
    return float(np.asarray(world.ctx_probs) @ per_ctx)


def bayes_onetime(world: FiniteOneTimeWorld):
    """Per context, hand off at the expected-realized-loss argmin (ties late)."""
    ER = world.mean_realized()
    picks = np.array([int(len(row) - 1 - np.argmin(row[::-1])) for row in ER])
    return picks, onetime_policy_risk(world, picks)


def bayes_onetime_by_enumeration(world: FiniteOneTimeWorld):
    if world.m ** world.K > 100_000:
        raise ValueError("enumeration space too large")
    best, best_p = np.inf, None
    for combo in itertools.product(range(world.m), repeat=world.K):
        picks = np.array(combo)
        risk = onetime_policy_risk(world, picks)
        if risk < best:
            best, best_p = risk, picks
    return best_p, best


# ---------------------------------------------------------------------------
# closed-form tabular empirical surrogate minimizers


def _safe_log_ratio(a: float, b: float) -> float:
    if a <= 0.0 and b <= 0.0:
        return 0.0
    if b <= 0.0:
        return SCORE_CLAMP
    if a <= 0.0:
        return -SCORE_CLAMP
    return float(np.clip(np.log(a / b), -SCORE_CLAMP, SCORE_CLAMP))


def fit_token_tabular(kind: str, ctx: np.ndarray, losses: np.ndarray,
                      costs: np.ndarray, K: int) -> np.ndarray:
    """Exact minimizer of the empirical token surrogate, one score per cell.

    logistic: r = ln(mean loss / mean cost); square: r = (l-c)/(l+c).
    Unvisited contexts get r = 0 (defer, matching the r = 0 tie rule).
    """
    L = losses.shape[1]
    scores = np.zeros((K, L))
    for k in range(K):
        idx = np.flatnonzero(ctx == k)
        if idx.size == 0:
            continue
        lbar = losses[idx].mean(axis=0)
        cbar = costs[idx].mean(axis=0)
        for j in range(L):
            if kind == "logistic":
                scores[k, j] = _safe_log_ratio(lbar[j], cbar[j])
            elif kind == "square":
                denom = lbar[j] + cbar[j]
                scores[k, j] = 0.0 if denom <= 0 else (lbar[j] - cbar[j]) / denom
            else:
                raise ValueError(f"unknown phi kind {kind!r}")
    return scores


def fit_onetime_tabular(kind: str, ctx: np.ndarray, realized: np.ndarray,
                        K: int) -> np.ndarray:
    """Exact minimizer of the empirical one-time surrogate per context.

    With summed sample weights W_j = sum_i (c_max_i - realized_ij):
    ce: softmax(g) must equal W/sum(W), so g_j = log W_j (clamped);
    mae: any one-hot on argmax W is minimal under a score clamp; ties resolve
    toward the latest candidate.
    """
    m = realized.shape[1]
    scores = np.zeros((K, m))
    for k in range(K):
        idx = np.flatnonzero(ctx == k)
        if idx.size == 0:
            scores[k] = 0.0
            scores[k, -1] = 1.0  # unvisited context: never defer
            continue
        R = realized[idx]
        w = np.max(R, axis=1, keepdims=True) - R
        W = w.sum(axis=0)
        if kind == "ce":
            total = W.sum()
            if total <= 0:
                scores[k] = 0.0
                continue
            with np.errstate(divide="ignore"):
                scores[k] = np.clip(np.log(np.maximum(W, 1e-300)),
                                    -SCORE_CLAMP, SCORE_CLAMP)
        elif kind == "mae":
            if W.sum() <= 0:
                scores[k] = 0.0
                continue
            scores[k] = -SCORE_CLAMP
            scores[k, argmax_last(W)] = SCORE_CLAMP
        else:
            raise ValueError(f"unknown psi kind {kind!r}")
    return scores


# ---------------------------------------------------------------------------
# consistency measurement


def consistency_gap(world, kind: str, n_samples: int, seed: int = 0,
                    capacity: str = "tabular") -> dict:
    """Realized risk of the empirical surrogate minimizer minus the Bayes risk.

    The rejector is tabular (one free score per context/step cell), so the
    approximation error is exactly zero and the gap is pure estimation error.
    """
    if capacity != "tabular":
        raise ValueError("only the tabular rejector is implemented (approximation "
                         "error must be zero for the gap to be interpretable)")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = derive_rng(4242, seed, n_samples)
    if isinstance(world, FiniteTokenWorld):
        ctx, losses, costs = world.sample(n_samples, rng)
        scores = fit_token_tabular(kind, ctx, losses, costs, world.K)
        decisions = scores >= 0.0
        _, bayes_risk = bayes_token(world)
        risk = token_policy_risk(world, decisions)
    elif isinstance(world, FiniteOneTimeWorld):
        ctx, realized = world.sample(n_samples, rng)
        scores = fit_onetime_tabular(kind, ctx, realized, world.K)
        picks = np.array([argmax_last(row) for row in scores])
        _, bayes_risk = bayes_onetime(world)
        risk = onetime_policy_risk(world, picks)
    else:
        raise TypeError(f"not a finite world: {type(world).__name__}")
    degenerate = world.degenerate_cells()
    return {
        "world": world.name, "kind": kind, "n": n_samples, "seed": seed,
        "risk": risk, "bayes_risk": bayes_risk, "gap": risk - bayes_risk,
        "scale": world.scale(), "degenerate": bool(degenerate),
        "degenerate_cells": degenerate,
    }


def gap_curve(world, kind: str, n_grid, seeds) -> dict:
    """Mean gap per n over seeds; input to bound_audit and the monotone check."""
    n_grid = [int(n) for n in n_grid]
    gaps = np.zeros((len(seeds), len(n_grid)))
    for si, seed in enumerate(seeds):
        for ni, n in enumerate(n_grid):
            gaps[si, ni] = consistency_gap(world, kind, n, seed)["gap"]
    return {"world": world.name, "kind": kind, "n_grid": n_grid,
            "seeds": list(seeds), "gaps": gaps, "mean_gaps": gaps.mean(axis=0)}


def bound_audit(world, kind: str, n_grid, seeds=range(5)) -> dict:
    """Directional rate check: slope of log(mean gap) vs log(n).

    A well-specified tabular world should shrink roughly like 1/sqrt(n)
    (slope near -0.5).  All-zero gaps mean every fit already reached Bayes:
    reported as converged with slope None.
    """
    n_grid = [int(n) for n in n_grid]
    if len(n_grid) < 3:
        raise ValueError("bound_audit needs at least 3 grid points")
    curve = gap_curve(world, kind, n_grid, seeds)
    mean_gaps = curve["mean_gaps"]
    if np.all(mean_gaps <= 0.0):
        return {**curve, "slope": None, "converged": True}
    floor = max(np.max(mean_gaps) * 1e-12, 1e-300)
    slope = float(np.polyfit(np.log(np.asarray(n_grid, dtype=float)),
                             np.log(np.maximum(mean_gaps, floor)), 1)[0])
    return {**curve, "slope": slope, "converged": bool(mean_gaps[-1] == 0.0)}


# ---------------------------------------------------------------------------
# fixed reference worlds


def make_fixed_worlds() -> dict:
    """Three frozen worlds: token (A), one-time (B), and a token world (C)
    whose decision margins are spread over decades so estimation error decays
    visibly across n = 10^2..10^5."""
    # A: clear margins, two-point outcome distributions per cell.
    def two_point(mu, spread, floor=0.0):
        s = max(min(spread, mu - floor), 0.0)  # keep the mean exactly mu
        return np.array([0.5, 0.5]), np.array([mu - s, mu + s])

    def cell(lmu, cmu, spread=0.4):
        pl, vl = two_point(lmu, spread, floor=0.0)
        pc, vc = two_point(cmu, spread, floor=1e-3)
        # joint outcomes: independent two-point loss and cost -> 4 outcomes
        probs = np.outer(pl, pc).ravel()
        losses = np.repeat(vl, 2)
        costs = np.tile(vc, 2)
        return probs, losses, costs

    def token_world(name, l_table, c_table, spread=0.4):
        K = len(l_table)
        L = len(l_table[0])
        op, lo, co = [], [], []
        for k in range(K):
            row_p, row_l, row_c = [], [], []
            for j in range(L):
                p, l, c = cell(l_table[k][j], c_table[k][j], spread)
                row_p.append(p)
                row_l.append(l)
                row_c.append(c)
            op.append(tuple(row_p))
            lo.append(tuple(row_l))
            co.append(tuple(row_c))
        probs = np.full(K, 1.0 / K)
        return FiniteTokenWorld(name, probs, tuple(op), tuple(lo), tuple(co))

    world_a = token_world(
        "A-token",
        l_table=[[1.2, 0.4, 0.9], [0.3, 1.0, 0.5], [0.8, 0.8, 1.4]],
        c_table=[[0.6, 0.9, 0.4], [0.8, 0.4, 1.1], [0.3, 1.3, 0.7]],
        spread=0.4,
    )

    # B: one-time world, 2 outcome vectors per context, clear argmins.
    world_b = FiniteOneTimeWorld(
        "B-onetime",
        ctx_probs=np.array([0.5, 0.3, 0.2]),
        vector_probs=(
            np.array([0.6, 0.4]),
            np.array([0.5, 0.5]),
            np.array([0.7, 0.3]),
        ),
        realized=(
            np.array([[1.6, 0.6, 1.1, 1.9], [2.0, 1.0, 1.3, 2.3]]),
            np.array([[0.9, 1.4, 1.8, 0.4], [1.3, 1.6, 2.0, 0.6]]),
            np.array([[1.1, 0.9, 0.5, 1.5], [1.5, 1.1, 0.9, 1.7]]),
        ),
    )

    # C: nine cells whose decision margins are spread geometrically over more
    # than three decades, so at every n some margins sit near the sampling
    # noise floor and the mean gap decays like the 1/sqrt(n) noise itself.
    base = 1.0
    margins = [[0.6, 0.2, 0.07], [0.025, 0.008, 0.003],
               [0.001, 0.0004, 0.00015]]
    l_table, c_table = [], []
    for k in range(3):
        lrow, crow = [], []
        for j in range(3):
            m = margins[k][j]
            if (k + j) % 2 == 0:
                lrow.append(base + m)
                crow.append(base)
            else:
                lrow.append(base)
                crow.append(base + m)
        l_table.append(lrow)
        c_table.append(crow)
    world_c = token_world("C-audit", l_table, c_table, spread=0.5)
    return {"A": world_a, "B": world_b, "C": world_c}


# ---------------------------------------------------------------------------
# world/v1 serialization


def world_to_dict(world) -> dict:
    if isinstance(world, FiniteTokenWorld):
        return {
            "schema": WORLD_SCHEMA, "view": "token", "name": world.name,
            "ctx_probs": list(map(float, world.ctx_probs)),
            "outcome_probs": [[list(map(float, q)) for q in row]
                              for row in world.outcome_probs],
            "losses": [[list(map(float, q)) for q in row] for row in world.losses],
            "costs": [[list(map(float, q)) for q in row] for row in world.costs],
        }
    if isinstance(world, FiniteOneTimeWorld):
        return {
            "schema": WORLD_SCHEMA, "view": "onetime", "name": world.name,
            "ctx_probs": list(map(float, world.ctx_probs)),
            "vector_probs": [list(map(float, q)) for q in world.vector_probs],
            "realized": [np.asarray(R).tolist() for R in world.realized],
        }
    raise TypeError(f"not a finite world: {type(world).__name__}")


def world_from_dict(doc: dict):
    if doc.get("schema") != WORLD_SCHEMA:
        raise ValueError(f"expected schema {WORLD_SCHEMA!r}, got {doc.get('schema')!r}")
    if doc["view"] == "token":
        return FiniteTokenWorld(
            doc["name"], np.array(doc["ctx_probs"]),
            tuple(tuple(np.array(q) for q in row) for row in doc["outcome_probs"]),
            tuple(tuple(np.array(q) for q in row) for row in doc["losses"]),
            tuple(tuple(np.array(q) for q in row) for row in doc["costs"]),
        )
    if doc["view"] == "onetime":
        return FiniteOneTimeWorld(
            doc["name"], np.array(doc["ctx_probs"]),
            tuple(np.array(q) for q in doc["vector_probs"]),
            tuple(np.array(R) for R in doc["realized"]),
        )
    raise ValueError(f"unknown world view {doc['view']!r}")


def write_world(path, world) -> None:
    with open(path, "w") as fh:
        json.dump(world_to_dict(world), fh, sort_keys=True, indent=1)
        fh.write("\n")


def read_world(path):
    with open(path) as fh:
        return world_from_dict(json.load(fh))
