"""Symbolic sequence task: an order-1 predictor in an order-2 world.

The world generates token sequences from a random order-2 Markov chain over a
small vocabulary.  The model is an order-1 greedy predictor fit on training
sequences and rolled out free-running (it conditions on its own previous
output).  The expert is an order-2 greedy predictor fit on the same corpus
and conditions on the true last two tokens, so its mistakes are rare and
handoff-point independent.  Losses are 0/1 mismatches against the true
continuation plus the per-token deferral price on the expert side.

Confidence is the negative log-probability of the greedy choice under the
fitted order-1 model; per-step entropies of the same predictive row are
recorded, so entropy-threshold baselines apply to this task.
"""

from __future__ import annotations

import json

import numpy as np

from ..core import (CandidateSet, CostSchedule, DataError, StepRecord, TaskBounds,
                    Trace, derive_rng)
from . import TaskAdapter, standardize_splits

CHAIN_SCHEMA = "textworld/v1"


def write_chain(path, P: np.ndarray) -> None:
    doc = {"schema": CHAIN_SCHEMA, "vocab": int(P.shape[0]),
           "tensor": P.ravel().tolist()}
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def read_chain(path) -> np.ndarray:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON ({exc})") from None
    if doc.get("schema") != CHAIN_SCHEMA:
        raise DataError(f"{path}: expected schema {CHAIN_SCHEMA!r}, "
                        f"got {doc.get('schema')!r}")
    v = int(doc["vocab"])
    P = np.array(doc["tensor"], dtype=np.float64)
    if P.size != v ** 3:
        raise DataError(f"{path}: tensor length {P.size} != vocab^3 = {v ** 3}")
    P = P.reshape(v, v, v)
    if not np.allclose(P.sum(axis=-1), 1.0, atol=1e-8) or np.any(P < 0):
        raise DataError(f"{path}: rows are not probability distributions")
    return P


def sample_chain(vocab: int, rng, concentration: float = 0.3,
                 deterministic: bool = False) -> np.ndarray:
    """Order-2 transition tensor P[v1, v2] -> distribution over next token."""
    if deterministic:
        P = np.zeros((vocab, vocab, vocab))
        nxt = rng.integers(0, vocab, size=(vocab, vocab))
        for a in range(vocab):
            for b in range(vocab):
                P[a, b, nxt[a, b]] = 1.0
        return P
    P = rng.gamma(concentration, size=(vocab, vocab, vocab))
    P /= P.sum(axis=-1, keepdims=True)
    return P


def rollout_chain(P: np.ndarray, ctx: tuple[int, int], length: int, rng) -> np.ndarray:
    vocab = P.shape[0]
    a, b = ctx
    out = np.empty(length, dtype=int)
    for t in range(length):
        out[t] = rng.choice(vocab, p=P[a, b])
        a, b = b, out[t]
    return out


def _normalize_rows(counts: np.ndarray) -> np.ndarray:
    totals = counts.sum(axis=-1, keepdims=True)
    vocab = counts.shape[-1]
    return np.where(totals > 0, counts / np.where(totals > 0, totals, 1.0),
                    1.0 / vocab)


def fit_order1(sequences, vocab: int, smoothing: float = 1.0) -> np.ndarray:
    """Add-constant-smoothed transition matrix from (prev -> next) counts.

    Unseen contexts (possible with zero smoothing) fall back to uniform.
    """
    counts = np.full((vocab, vocab), smoothing)
    for ctx, targets in sequences:
        prev = ctx[1]
        for tok in targets:
            counts[prev, tok] += 1.0
            prev = tok
    return _normalize_rows(counts)


def fit_order2(sequences, vocab: int, smoothing: float = 0.1) -> np.ndarray:
    counts = np.full((vocab, vocab, vocab), smoothing)
    for ctx, targets in sequences:
        a, b = ctx
        for tok in targets:
            counts[a, b, tok] += 1.0
            a, b = b, tok
    return _normalize_rows(counts)


def greedy(dist_row: np.ndarray) -> int:
    return int(np.argmax(dist_row))  # ties resolve to the lowest token id


class TextTask(TaskAdapter):
    name = "text"
    conf_kind = "neg_log_prob"
    has_entropy = True
    token_mode = "reroll"

    def __init__(self, vocab: int = 10, length: int = 12, alpha1: float = 0.1,
                 concentration: float = 0.3, deterministic: bool = False,
                 chain_seed: int = 77, chain_path=None):
        if vocab < 2:
            raise ValueError("vocab must be >= 2")
        if length < 2:
            raise ValueError("length must be >= 2")
        if alpha1 < 0:
            raise ValueError("alpha1 must be >= 0")
        self.vocab = int(vocab)
        self.L = int(length)
        self.alpha1 = float(alpha1)
        self.concentration = float(concentration)
        self.deterministic = bool(deterministic)
        self.chain_seed = int(chain_seed)
        self.chain_path = chain_path
        self._cache = {}

    def chain(self) -> np.ndarray:
        """The order-2 world tensor: loaded from chain_path if set, else sampled."""
        if self.chain_path is not None:
            P = read_chain(self.chain_path)
            if P.shape[0] != self.vocab:
                raise DataError(f"{self.chain_path}: chain vocab {P.shape[0]} "
                                f"!= task vocab {self.vocab}")
            return P
        return sample_chain(self.vocab, derive_rng(9201, self.chain_seed),
                            self.concentration, self.deterministic)

    def bounds(self) -> TaskBounds:
        return TaskBounds(loss_max=1.0, cost_min=0.0,
                          cost_max=1.0 + self.alpha1 / self.L)

    def build_dataset(self, n_train: int, n_test: int, seed: int):
        P = self.chain()
        rng = derive_rng(9202, seed)
        n_total = n_train + n_test
        ctxs = rng.integers(0, self.vocab, size=(n_total, 2))
        seqs = [rollout_chain(P, tuple(ctxs[i]), self.L, rng) for i in range(n_total)]
        corpus = [(tuple(ctxs[i]), seqs[i]) for i in range(n_train)]
        M1 = fit_order1(corpus, self.vocab)
        M2 = fit_order2(corpus, self.vocab)
        logM1 = np.log(M1)
        ent1 = -np.sum(M1 * logM1, axis=1)
        sorted_rows = np.sort(M1, axis=1)
        margin1 = sorted_rows[:, -1] - sorted_rows[:, -2]
        schedule = CostSchedule(self.alpha1, self.L)
        price = schedule.per_token
        cand = CandidateSet.full(self.L)
        traces = []
        for i in range(n_total):
            iid = f"text-{seed}-{i}"
            y = seqs[i]
            a, b = ctxs[i]
            model_toks = np.empty(self.L, dtype=int)
            conf = np.empty(self.L)
            ent = np.empty(self.L)
            feats = np.empty((self.L, 5))
            prev = b
            for j in range(self.L):
                tok = greedy(M1[prev])
                model_toks[j] = tok
                conf[j] = -logM1[prev, tok]
                ent[j] = ent1[prev]
                feats[j] = [conf[j], ent[j], M1[prev].max(), margin1[prev],
                            (j + 1) / self.L]
                prev = tok
            ea, eb = a, b
            expert_toks = np.empty(self.L, dtype=int)
            for j in range(self.L):
                expert_toks[j] = greedy(M2[ea, eb])
                ea, eb = eb, y[j]
            losses = (model_toks != y).astype(float)
            costs = (expert_toks != y).astype(float) + price
            steps = tuple(
                StepRecord(
                    j=j + 1,
                    model_pred=float(model_toks[j]),
                    expert_pred=float(expert_toks[j]),
                    model_loss=float(losses[j]),
                    expert_cost=float(costs[j]),
                    conf_score=float(conf[j]),
                    features=feats[j].copy(),
                    entropy=float(ent[j]),
                )
                for j in range(self.L)
            )
            cum = np.concatenate([[0.0], np.cumsum(losses)])
            suffix = np.concatenate([np.cumsum(costs[::-1])[::-1], [0.0]])
            hi = float(np.median(ent))
            x_summary = np.array([
                a / self.vocab, b / self.vocab, np.mean(conf), np.max(conf),
                np.mean(ent), np.max(ent), float(np.argmax(ent) + 1) / self.L,
                float(np.mean(ent > hi)),
            ])
            traces.append(Trace(
                instance_id=iid,
                x_summary=x_summary,
                steps=steps,
                candidates=cand,
                prefix_losses=cum,
                onetime_costs=suffix,
                expert_full_loss=float(suffix[0]),
                model_full_loss=float(cum[-1]),
            ))
            self._cache[iid] = {"y": y.copy(), "expert": expert_toks.copy(),
                                "ctx": (int(a), int(b)), "M1": M1}
        return standardize_splits(traces[:n_train], traces[n_train:])

    def token_reroll(self, traces):
        """Re-run the order-1 rollout, splicing expert tokens in when deferred."""
        missing = [t.instance_id for t in traces if t.instance_id not in self._cache]
        if missing:
            raise ValueError(f"reroll needs traces built by this adapter; unknown ids "
                             f"{missing[:3]}")
        info = [self._cache[t.instance_id] for t in traces]
        y = np.stack([d["y"] for d in info])
        experts = np.stack([d["expert"] for d in info])
        prev0 = np.array([d["ctx"][1] for d in info])
        M1 = info[0]["M1"]
        greedy_next = np.argmax(M1, axis=1)
        price = CostSchedule(self.alpha1, self.L).per_token

        def reroll(mask):
            mask = np.asarray(mask, dtype=bool)
            prev = prev0.copy()
            total = np.zeros(len(info))
            for j in range(self.L):
                pred = greedy_next[prev]
                out = np.where(mask[:, j], experts[:, j], pred)
                loss = np.where(mask[:, j],
                                (experts[:, j] != y[:, j]) + price,
                                (pred != y[:, j]).astype(float))
                total += loss
                prev = out
            return total

        return reroll

    def describe(self) -> dict:
        return {"task": self.name, "conf_kind": self.conf_kind, "L": self.L,
                "vocab": self.vocab, "alpha1": self.alpha1,
                "deterministic": self.deterministic}
