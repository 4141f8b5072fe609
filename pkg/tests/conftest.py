import numpy as np
import pytest

from seqdefer.core import CandidateSet, StepRecord, Trace


def make_random_trace(rng, L=6, candidates=None, loss_scale=1.0, instance_id="t0"):
    """Random but valid trace: arbitrary nonnegative losses/costs, coherent tables.

    Endpoint coherence (prefix at L+1 = model_full_loss, handoff cost 0 at L+1,
    realized at j=1 = expert_full_loss) is maintained so curve code can rely on it.
    """
    if candidates is None:
        candidates = CandidateSet.full(L)
    losses = rng.uniform(0.0, loss_scale, size=L)
    costs = rng.uniform(1e-3, loss_scale, size=L)
    steps = tuple(
        StepRecord(
            j=j + 1,
            model_pred=float(rng.normal()),
            expert_pred=float(rng.normal()),
            model_loss=float(losses[j]),
            expert_cost=float(costs[j]),
            conf_score=float(rng.uniform(0.0, 3.0)),
            features=rng.normal(size=4),
            entropy=float(rng.uniform(0.0, 2.0)),
        )
        for j in range(L)
    )
    cum_loss = np.concatenate([[0.0], np.cumsum(losses)])  # cum_loss[k] = loss of first k tokens
    suffix_cost = np.concatenate([np.cumsum(costs[::-1])[::-1], [0.0]])  # sum of costs j..L
    pos = np.array(candidates.positions)
    prefix_losses = cum_loss[pos - 1]
    onetime_costs = suffix_cost[pos - 1]
    return Trace(
        instance_id=instance_id,
        x_summary=rng.normal(size=3),
        steps=steps,
        candidates=candidates,
        prefix_losses=prefix_losses,
        onetime_costs=onetime_costs,
        expert_full_loss=float(suffix_cost[0]),
        model_full_loss=float(cum_loss[L]),
    )


def make_explicit_trace(losses, costs, conf=None, candidates=None, x_summary=None,
                        entropy=None, instance_id="toy"):
    """Trace with hand-picked per-step losses/costs and telescoping tables."""
    losses = np.asarray(losses, dtype=np.float64)
    costs = np.asarray(costs, dtype=np.float64)
    L = len(losses)
    if candidates is None:
        candidates = CandidateSet.full(L)
    if conf is None:
        conf = np.ones(L)
    steps = tuple(
        StepRecord(
            j=j + 1,
            model_pred=0.0,
            expert_pred=0.0,
            model_loss=float(losses[j]),
            expert_cost=float(costs[j]),
            conf_score=float(conf[j]),
            features=np.array([float(losses[j]), float(costs[j])]),
            entropy=None if entropy is None else float(entropy[j]),
        )
        for j in range(L)
    )
    cum_loss = np.concatenate([[0.0], np.cumsum(losses)])
    suffix_cost = np.concatenate([np.cumsum(costs[::-1])[::-1], [0.0]])
    pos = np.array(candidates.positions)
    return Trace(
        instance_id=instance_id,
        x_summary=np.zeros(2) if x_summary is None else np.asarray(x_summary, dtype=np.float64),
        steps=steps,
        candidates=candidates,
        prefix_losses=cum_loss[pos - 1],
        onetime_costs=suffix_cost[pos - 1],
        expert_full_loss=float(suffix_cost[0]),
        model_full_loss=float(cum_loss[L]),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)
