"""Core data model for sequence-level deferral.

A *trace* is the precomputed record of one instance: the model's own rollout,
per-step losses and expert costs, confidence scores, and the prefix-loss /
handoff-cost tables for a grid of one-time deferral positions.  Every loss,
rejector, baseline and curve downstream consumes traces, so the invariants are
enforced here once.

Positions are 1-based throughout: token steps are j = 1..L and j = L+1 encodes
"never defer" (the model completes the sequence alone).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

TRACE_SCHEMA = "trace/v1"


class ConfigError(ValueError):
    """Bad experiment configuration (unknown key, wrong type, missing field)."""


class DataError(ValueError):
    """Unusable input data (unparseable rows, stale hashes, truncated files)."""


def derive_rng(*keys: int) -> np.random.Generator:
    """Deterministic generator from an integer key path (seed, stream, index, ...)."""
    return np.random.default_rng(list(keys))


def _as_readonly(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CostSchedule:
    """Linear deferral-cost ladder: deferring at position j costs alpha_at(j).

    The ladder decreases linearly from alpha1 (defer everything) to alpha1/L
    (defer only the last token), so the per-token price is alpha1/L and
    deferring the suffix j..L costs exactly the sum of its per-token prices.
    """

    alpha1: float
    L: int

    def __post_init__(self):
        if not np.isfinite(self.alpha1) or self.alpha1 < 0:
            raise ValueError(f"alpha1 must be finite and >= 0, got {self.alpha1}")
        if self.L < 1:
            raise ValueError(f"L must be >= 1, got {self.L}")

    def alpha_at(self, j: int) -> float:
        if not 1 <= j <= self.L:
            raise IndexError(f"position j={j} outside 1..{self.L}")
        return (self.L - j + 1) / self.L * self.alpha1

    @property
    def per_token(self) -> float:
        return self.alpha1 / self.L


def alpha_at(schedule: CostSchedule, j: int) -> float:
    return schedule.alpha_at(j)


@dataclass(frozen=True)
class CandidateSet:
    """Allowed one-time handoff positions: strictly increasing, contains L+1."""

    L: int
    positions: tuple[int, ...]

    def __post_init__(self):
        pos = tuple(int(p) for p in self.positions)
        object.__setattr__(self, "positions", pos)
        if len(pos) < 2:
            raise ValueError("candidate set needs at least 2 positions")
        if any(b <= a for a, b in zip(pos, pos[1:])):
            raise ValueError(f"positions must be strictly increasing, got {pos}")
        if pos[0] < 1 or pos[-1] > self.L + 1:
            raise ValueError(f"positions must lie in 1..L+1={self.L + 1}, got {pos}")
        if pos[-1] != self.L + 1:
            raise ValueError(f"candidate set must contain L+1={self.L + 1}")

    def __len__(self) -> int:
        return len(self.positions)

    def __iter__(self):
        return iter(self.positions)

    def __contains__(self, j) -> bool:
        return j in self.positions

    def index_of(self, j: int) -> int:
        """0-based slot of position j; IndexError if j is not a candidate."""
        try:
            return self.positions.index(j)
        except ValueError:
            raise IndexError(f"j={j} not in candidate set {self.positions}") from None

    def deferred_tokens(self, j: int) -> int:
        """Number of tokens the expert produces when handing off at j."""
        self.index_of(j)
        return self.L - j + 1

    @classmethod
    def full(cls, L: int) -> "CandidateSet":
        return cls(L, tuple(range(1, L + 2)))

    @classmethod
    def uniform_grid(cls, L: int, size: int) -> "CandidateSet":
        """size positions spread evenly over 1..L+1; always contains L+1.

        Rounding collisions are deduplicated, so the realized size can be
        smaller than requested for size close to L+1.
        """
        if size < 2:
            raise ValueError(f"grid size must be >= 2, got {size}")
        size = min(size, L + 1)
        grid = np.unique(np.rint(np.linspace(1, L + 1, size)).astype(int))
        return cls(L, tuple(grid.tolist()))


@dataclass(frozen=True)
class StepRecord:
    """One token step of a trace.

    model_loss is the per-step loss of the model's own prediction; expert_cost
    is the per-step cost of letting the expert produce this token instead
    (task loss of the expert token plus the per-token deferral price).
    entropy is the predictive-distribution entropy where the task has a finite
    vocabulary, else None.
    """

    j: int
    model_pred: float
    expert_pred: float
    model_loss: float
    expert_cost: float
    conf_score: float
    features: np.ndarray
    entropy: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "features", _as_readonly(self.features))


@dataclass(frozen=True)
class Trace:
    """Precomputed per-instance record; the single input everything consumes."""

    instance_id: str
    x_summary: np.ndarray
    steps: tuple[StepRecord, ...]
    candidates: CandidateSet
    prefix_losses: np.ndarray  # loss of the model prefix before j, one entry per candidate
    onetime_costs: np.ndarray  # expert completion cost from j (incl. alpha_j), per candidate
    expert_full_loss: float  # system loss when deferring at j=1
    model_full_loss: float  # system loss when never deferring (j=L+1)

    def __post_init__(self):
        object.__setattr__(self, "x_summary", _as_readonly(self.x_summary))
        object.__setattr__(self, "steps", tuple(self.steps))
        object.__setattr__(self, "prefix_losses", _as_readonly(self.prefix_losses))
        object.__setattr__(self, "onetime_costs", _as_readonly(self.onetime_costs))

    @property
    def L(self) -> int:
        return self.candidates.L

    def step_losses(self) -> np.ndarray:
        return np.array([s.model_loss for s in self.steps])

    def step_costs(self) -> np.ndarray:
        return np.array([s.expert_cost for s in self.steps])

    def conf_scores(self) -> np.ndarray:
        return np.array([s.conf_score for s in self.steps])

    def entropies(self) -> np.ndarray | None:
        if any(s.entropy is None for s in self.steps):
            return None
        return np.array([s.entropy for s in self.steps])

    def feature_matrix(self) -> np.ndarray:
        return np.stack([s.features for s in self.steps])


@dataclass(frozen=True)
class TaskBounds:
    """Task-declared envelopes: per-step loss <= loss_max, cost in [cost_min, cost_max]."""

    loss_max: float
    cost_min: float
    cost_max: float


def validate_trace(trace: Trace, bounds: TaskBounds | None = None) -> str | None:
    """Check every trace invariant; returns None if ok, else the first violation.

    Violations are returned, not raised, so callers can report them alongside
    the offending instance id.
    """
    L = trace.candidates.L
    if len(trace.steps) != L:
        return f"steps: expected {L} records, got {len(trace.steps)}"
    if not np.all(np.isfinite(trace.x_summary)):
        return "x_summary: non-finite entry"
    feat_dim = None
    for i, s in enumerate(trace.steps):
        path = f"steps[{i}]"
        if s.j != i + 1:
            return f"{path}.j: expected {i + 1}, got {s.j}"
        if not np.isfinite(s.model_loss) or s.model_loss < 0:
            return f"{path}.model_loss: must be finite and >= 0, got {s.model_loss}"
        if not np.isfinite(s.expert_cost) or s.expert_cost <= 0:
            return f"{path}.expert_cost: must be finite and > 0, got {s.expert_cost}"
        if not np.isfinite(s.conf_score) or s.conf_score < 0:
            return f"{path}.conf_score: must be finite and >= 0, got {s.conf_score}"
        if not np.all(np.isfinite(s.features)):
            return f"{path}.features: non-finite entry"
        if feat_dim is None:
            feat_dim = s.features.shape
        elif s.features.shape != feat_dim:
            return f"{path}.features: dimension {s.features.shape} != {feat_dim}"
        if s.entropy is not None and (not np.isfinite(s.entropy) or s.entropy < 0):
            return f"{path}.entropy: must be finite and >= 0, got {s.entropy}"
        if bounds is not None:
            if s.model_loss > bounds.loss_max * (1 + 1e-12):
                return f"{path}.model_loss: {s.model_loss} exceeds bound {bounds.loss_max}"
            if not bounds.cost_min * (1 - 1e-12) <= s.expert_cost <= bounds.cost_max * (1 + 1e-12):
                return (
                    f"{path}.expert_cost: {s.expert_cost} outside "
                    f"[{bounds.cost_min}, {bounds.cost_max}]"
                )
    m = len(trace.candidates)
    if trace.prefix_losses.shape != (m,):
        return f"prefix_losses: length {trace.prefix_losses.shape} != |candidates|={m}"
    if trace.onetime_costs.shape != (m,):
        return f"onetime_costs: length {trace.onetime_costs.shape} != |candidates|={m}"
    if not np.all(np.isfinite(trace.prefix_losses)):
        return "prefix_losses: non-finite entry"
    if not np.all(np.isfinite(trace.onetime_costs)):
        return "onetime_costs: non-finite entry"
    if np.any(trace.prefix_losses < 0) or np.any(trace.onetime_costs < 0):
        return "prefix_losses/onetime_costs: negative entry"
    if trace.candidates.positions[0] == 1 and trace.prefix_losses[0] != 0.0:
        return f"prefix loss at j=1 must be 0, got {trace.prefix_losses[0]}"
    if not np.isfinite(trace.expert_full_loss) or not np.isfinite(trace.model_full_loss):
        return "expert_full_loss/model_full_loss: non-finite"
    return None


def recommend_alpha1(traces: Sequence[Trace]) -> float:
    """Rule-of-thumb deferral price: median model-vs-expert full-loss gap, floored at 0.

    Meant to be computed on pilot traces built with alpha1 = 0 so the stored
    full losses are pure quality terms.
    """
    if len(traces) == 0:
        raise ValueError("recommend_alpha1 needs at least one trace")
    diffs = np.array([t.model_full_loss - t.expert_full_loss for t in traces])
    return float(max(0.0, np.median(diffs)))


# ---------------------------------------------------------------------------
# trace/v1 NDJSON serialization


def trace_to_dict(trace: Trace) -> dict:
    return {
        "version": TRACE_SCHEMA,
        "instance_id": trace.instance_id,
        "x_summary": trace.x_summary.tolist(),
        "L": trace.candidates.L,
        "candidates": list(trace.candidates.positions),
        "steps": [
            {
                "j": s.j,
                "model_pred": s.model_pred,
                "expert_pred": s.expert_pred,
                "model_loss": s.model_loss,
                "expert_cost": s.expert_cost,
                "conf_score": s.conf_score,
                "features": s.features.tolist(),
                "entropy": s.entropy,
            }
            for s in trace.steps
        ],
        "prefix_losses": trace.prefix_losses.tolist(),
        "onetime_costs": trace.onetime_costs.tolist(),
        "expert_full_loss": trace.expert_full_loss,
        "model_full_loss": trace.model_full_loss,
    }


def trace_from_dict(doc: dict) -> Trace:
    version = doc.get("version")
    if version != TRACE_SCHEMA:
        raise ValueError(f"unsupported trace schema {version!r}, expected {TRACE_SCHEMA!r}")
    steps = tuple(
        StepRecord(
            j=s["j"],
            model_pred=s["model_pred"],
            expert_pred=s["expert_pred"],
            model_loss=s["model_loss"],
            expert_cost=s["expert_cost"],
            conf_score=s["conf_score"],
            features=np.array(s["features"], dtype=np.float64),
            entropy=s.get("entropy"),
        )
        for s in doc["steps"]
    )
    return Trace(
        instance_id=doc["instance_id"],
        x_summary=np.array(doc["x_summary"], dtype=np.float64),
        steps=steps,
        candidates=CandidateSet(doc["L"], tuple(doc["candidates"])),
        prefix_losses=np.array(doc["prefix_losses"], dtype=np.float64),
        onetime_costs=np.array(doc["onetime_costs"], dtype=np.float64),
        expert_full_loss=doc["expert_full_loss"],
        model_full_loss=doc["model_full_loss"],
    )


def write_traces(path, traces: Iterable[Trace]) -> None:
    with open(path, "w") as fh:
        for t in traces:
            fh.write(json.dumps(trace_to_dict(t)) + "\n")


def read_traces(path) -> list[Trace]:
    out = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{line_no}: malformed trace line: {e}") from None
            out.append(trace_from_dict(doc))
    return out
