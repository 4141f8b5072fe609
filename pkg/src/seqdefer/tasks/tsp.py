"""Routing task: nearest-neighbor tours with a 2-opt expert.

An instance is a cloud of standard-normal cities.  The model builds a closed
tour greedily (always hop to the nearest unvisited city, ties to the lowest
index), one decision per token.  Handing off at position j freezes the first
j-1 hops and lets the expert finish: it keeps the greedy suffix but improves
it with 2-opt moves restricted to the non-frozen part of the tour (the closing
edge included).  Pre-computing the expert completion for every candidate j
gives the one-time handoff cost table; the per-step confidence is the
negative log-probability of the greedy choice under a softmax over distances.

Token-level deferral is not meaningful here (a one-step expert would pick the
same nearest hop), so the adapter flags it unsupported.
"""

from __future__ import annotations

import json

import numpy as np

from ..core import (CandidateSet, CostSchedule, DataError, StepRecord, TaskBounds,
                    Trace, derive_rng)
from . import TaskAdapter, standardize_splits

COORDS_SCHEMA = "tsp/v1"


def write_coords(path, instances) -> None:
    """Export instance coordinates as JSON: (n_instances, n_cities, 2)."""
    arr = np.asarray(instances, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise ValueError(f"instances must be (n, n_cities, 2), got {arr.shape}")
    doc = {"schema": COORDS_SCHEMA, "n_cities": int(arr.shape[1]),
           "instances": arr.tolist()}
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def read_coords(path) -> np.ndarray:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON ({exc})") from None
    if doc.get("schema") != COORDS_SCHEMA:
        raise DataError(f"{path}: expected schema {COORDS_SCHEMA!r}, "
                        f"got {doc.get('schema')!r}")
    try:
        arr = np.asarray(doc["instances"], dtype=np.float64)
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: bad instances field ({exc})") from None
    if arr.ndim != 3 or arr.shape[2] != 2 or arr.shape[1] != doc.get("n_cities"):
        raise DataError(f"{path}: instances must be (n, n_cities, 2) with "
                        f"n_cities = {doc.get('n_cities')}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{path}: non-finite coordinates")
    return arr


def pairwise_distances(coords: np.ndarray) -> np.ndarray:
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def nn_rollout(D: np.ndarray, temp: float = 1.0):
    """Greedy nearest-neighbor path from city 0.

    Returns (order, edges, conf, entropy, remaining_mean): per decision step,
    the hop length, -log softmax(-d/temp) probability of the chosen city, the
    entropy of that distribution, and the mean distance to unvisited cities.
    """
    n = D.shape[0]
    order = np.zeros(n, dtype=int)
    visited = np.zeros(n, dtype=bool)
    visited[0] = True
    edges, conf, ent, rem_mean = [], [], [], []
    cur = 0
    for _ in range(n - 1):
        cand = np.flatnonzero(~visited)
        d = D[cur, cand]
        z = -d / temp
        z = z - np.max(z)
        logp = z - np.log(np.sum(np.exp(z)))
        p = np.exp(logp)
        k = int(np.argmin(d))  # ties resolve to the lowest city index
        nxt = int(cand[k])
        edges.append(float(d[k]))
        conf.append(float(-logp[k]))
        ent.append(float(-np.sum(p * logp)))
        rem_mean.append(float(np.mean(d)))
        visited[nxt] = True
        order[np.count_nonzero(visited) - 1] = nxt
        cur = nxt
    return order, np.array(edges), np.array(conf), np.array(ent), np.array(rem_mean)


def tour_length(D: np.ndarray, order: np.ndarray) -> float:
    nxt = np.roll(order, -1)
    return float(np.sum(D[order, nxt]))


def two_opt_suffix(D: np.ndarray, order: np.ndarray, first_free: int,
                   tol: float = 1e-12, max_moves: int | None = None) -> np.ndarray:
    """Best-improvement 2-opt keeping order[:first_free] frozen.

    Reversing order[i..j] (first_free <= i < j <= n-1) rewires edges
    (i-1, i) and (j, j+1 mod n); the closing edge back to city 0 is fair game.
    """
    o = np.array(order, dtype=int)
    n = len(o)
    if first_free < 1:
        raise ValueError("first_free must leave at least the start city frozen")
    if first_free >= n - 1:
        return o
    cap = max_moves if max_moves is not None else 20 * n
    idx = np.arange(first_free, n)
    I, J = np.meshgrid(idx, idx, indexing="ij")
    upper = J > I
    for _ in range(cap):
        a, b, c, d = o[I - 1], o[I], o[J], o[(J + 1) % n]
        delta = D[a, c] + D[b, d] - D[a, b] - D[c, d]
        delta[~upper] = np.inf
        flat = int(np.argmin(delta))
        i, j = idx[flat // len(idx)], idx[flat % len(idx)]
        if delta.flat[flat] >= -tol:
            break
        o[i:j + 1] = o[i:j + 1][::-1]
    return o


def held_karp(D: np.ndarray) -> float:
    """Exact closed-tour length by subset DP; practical for n <= 12."""
    n = D.shape[0]
    if n > 13:
        raise ValueError(f"exact solver limited to small instances, got n={n}")
    if n == 1:
        return 0.0
    full = 1 << n
    INF = np.inf
    dp = np.full((full, n), INF)
    dp[1, 0] = 0.0
    for mask in range(1, full):
        if not mask & 1:
            continue
        lasts = [v for v in range(n) if mask >> v & 1]
        row = dp[mask, lasts]
        if not np.any(np.isfinite(row)):
            continue
        for nxt in range(n):
            if mask >> nxt & 1:
                continue
            best = np.min(row + D[lasts, nxt])
            m2 = mask | 1 << nxt
            if best < dp[m2, nxt]:
                dp[m2, nxt] = best
    final = dp[full - 1, :] + D[:, 0]
    return float(np.min(final[1:])) if n > 1 else 0.0


def exact_completion(D: np.ndarray, order: np.ndarray, first_free: int) -> float:
    """Optimal closed tour with order[:first_free] frozen (subset DP)."""
    n = len(order)
    prefix = order[:first_free]
    rest = [int(v) for v in order[first_free:]]
    k = len(rest)
    if k > 12:
        raise ValueError(f"exact completion limited to 12 free cities, got {k}")
    base = float(np.sum(D[prefix[:-1], prefix[1:]])) if first_free > 1 else 0.0
    start = int(prefix[-1])
    if k == 0:
        return base + float(D[start, order[0]])
    full = 1 << k
    dp = np.full((full, k), np.inf)
    for v in range(k):
        dp[1 << v, v] = D[start, rest[v]]
    rest_arr = np.array(rest)
    for mask in range(1, full):
        lasts = [v for v in range(k) if mask >> v & 1]
        row = dp[mask, lasts]
        if not np.any(np.isfinite(row)):
            continue
        for nxt in range(k):
            if mask >> nxt & 1:
                continue
            best = np.min(row + D[rest_arr[lasts], rest[nxt]])
            m2 = mask | 1 << nxt
            if best < dp[m2, nxt]:
                dp[m2, nxt] = best
    closing = dp[full - 1, :] + D[rest_arr, int(order[0])]
    return base + float(np.min(closing))


def build_tsp_trace(coords: np.ndarray, alpha1: float, instance_id: str,
                    temp: float = 1.0, exact_expert: bool = False) -> Trace:
    D = pairwise_distances(coords)
    n = D.shape[0]
    L = n - 1
    schedule = CostSchedule(alpha1, L)
    order, edges, conf, ent, rem_mean = nn_rollout(D, temp)
    prefix_open = np.concatenate([[0.0], np.cumsum(edges)])
    model_full = prefix_open[L] + D[order[-1], order[0]]
    cand = CandidateSet.full(L)
    completed = np.empty(L)
    for j in range(1, L + 1):
        if exact_expert:
            completed[j - 1] = exact_completion(D, order, j)
        else:
            completed[j - 1] = tour_length(D, two_opt_suffix(D, order, j))
    costs_table = np.empty(L + 1)
    for idx, j in enumerate(cand.positions[:-1]):
        costs_table[idx] = completed[j - 1] - prefix_open[j - 1] + schedule.alpha_at(j)
    costs_table[L] = 0.0
    prefix_table = np.concatenate([prefix_open[:L], [model_full]])
    price = schedule.per_token
    steps = tuple(
        StepRecord(
            j=j,
            model_pred=float(order[j]),
            expert_pred=float(order[j]),
            model_loss=float(edges[j - 1]),
            expert_cost=float(edges[j - 1] + price),
            conf_score=float(conf[j - 1]),
            features=np.array([edges[j - 1], conf[j - 1], ent[j - 1], j / L,
                               rem_mean[j - 1]]),
            entropy=float(ent[j - 1]),
        )
        for j in range(1, L + 1)
    )
    profile_idx = np.unique(np.linspace(0, L - 1, 10).round().astype(int))

    def profile_of(values):
        p = values[profile_idx]
        if len(p) < 10:
            p = np.pad(p, (0, 10 - len(p)), mode="edge")
        return p

    # three 10-point profiles over the rollout: raw edge lengths, chooser
    # confidence, and cumulative tour share -- the scorer has to locate the
    # bad stretch, not just know one exists
    x_summary = np.concatenate([
        [np.mean(edges), np.std(edges), np.max(edges), D[order[-1], order[0]],
         np.mean(ent), np.max(ent)],
        profile_of(edges),
        profile_of(conf),
        profile_of(prefix_open[1:] / max(prefix_open[L], 1e-12)),
    ])
    return Trace(
        instance_id=instance_id,
        x_summary=x_summary,
        steps=steps,
        candidates=cand,
        prefix_losses=prefix_table,
        onetime_costs=costs_table,
        expert_full_loss=float(costs_table[0]),
        model_full_loss=float(model_full),
    )


class TSPTask(TaskAdapter):
    name = "tsp"
    conf_kind = "neg_log_prob"
    has_entropy = True
    token_mode = None  # single-hop expert would make the same greedy choice

    def __init__(self, n_cities: int = 50, alpha1: float = 0.5, temp: float = 1.0,
                 exact_expert: bool = False, coords_path=None):
        if n_cities < 4:
            raise ValueError("need at least 4 cities")
        if alpha1 < 0:
            raise ValueError("alpha1 must be >= 0")
        if exact_expert and n_cities > 13:
            raise ValueError("exact expert only for n_cities <= 13")
        self.n_cities = int(n_cities)
        self.alpha1 = float(alpha1)
        self.temp = float(temp)
        self.exact_expert = bool(exact_expert)
        self.coords_path = coords_path
        self.L = self.n_cities - 1

    def bounds(self) -> TaskBounds:
        return TaskBounds(loss_max=40.0, cost_min=0.0, cost_max=200.0 + self.alpha1)

    def train_recipe(self, view: str, seed: int) -> dict:
        from ..rejectors import onetime_default_config

        if view == "onetime":
            cfg = onetime_default_config(seed=seed)
            return {"config": cfg, "arch": {"hidden": (16,)}, "members": 5}
        return super().train_recipe(view, seed)

    def sample_coords(self, rng) -> np.ndarray:
        return rng.normal(size=(self.n_cities, 2))

    def _coords_list(self, n_total: int, seed: int):
        if self.coords_path is not None:
            arr = read_coords(self.coords_path)
            if arr.shape[1] != self.n_cities:
                raise DataError(f"{self.coords_path}: file has {arr.shape[1]} "
                                f"cities per instance, task expects {self.n_cities}")
            if len(arr) < n_total:
                raise DataError(f"{self.coords_path}: only {len(arr)} instances "
                                f"available, need {n_total}")
            return list(arr[:n_total])
        rng = derive_rng(9001, seed)
        return [self.sample_coords(rng) for _ in range(n_total)]

    def build_dataset(self, n_train: int, n_test: int, seed: int):
        coords = self._coords_list(n_train + n_test, seed)
        traces = [
            build_tsp_trace(coords[i], self.alpha1,
                            f"tsp-{seed}-{i}", self.temp, self.exact_expert)
            for i in range(n_train + n_test)
        ]
        return standardize_splits(traces[:n_train], traces[n_train:])

    def curve_transform(self):
        alpha1 = self.alpha1

        def pct_over_expert(trace, value):
            raw = trace.expert_full_loss - alpha1
            return 100.0 * (value - raw) / raw

        return pct_over_expert

    def describe(self) -> dict:
        return {"task": self.name, "conf_kind": self.conf_kind, "L": self.L,
                "n_cities": self.n_cities, "alpha1": self.alpha1,
                "exact_expert": self.exact_expert,
                "coords": str(self.coords_path) if self.coords_path else None}
