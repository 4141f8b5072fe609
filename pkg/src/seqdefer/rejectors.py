"""Model-based rejectors and their training loop.

Two families:
  * TokenRejector — shared trunk applied at every step j; input is the step's
    feature vector plus the previous keep/defer decision bit, optionally with
    a recurrent state vector carried along the sequence.  Trained on the
    token-level surrogate (logistic or square phi).
  * OneTimeRejector — MLP on the instance summary with one head per candidate
    handoff position, outputs clamped to (-M, M) via M*tanh(raw/M).  Trained
    on the weighted softmax surrogate (ce or mae psi).

Training is plain mini-batch gradient descent with decoupled weight decay,
global-norm gradient clipping, (patience, min_delta) early stopping on a
held-out split, and — for token models — teacher-forced, free-running or
scheduled-sampling context rollout.  Everything is deterministic given the
config seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .core import CandidateSet, Trace, derive_rng
from .surrogates import PHI_KINDS, PSI_KINDS, onetime_weights

MODEL_SCHEMA = "model/v1"


@dataclass(frozen=True)
class MLPSpec:
    input_dim: int
    hidden_layers: tuple[int, ...]
    output_dim: int
    activation: str = "relu"
    dropout_rate: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be >= 1")
        if any(h < 1 for h in self.hidden_layers):
            raise ValueError("hidden layer widths must be >= 1")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


class MLP:
    """Dense trunk; weights initialized from the given rng (He-style scaling)."""

    def __init__(self, spec: MLPSpec, rng: np.random.Generator):
        self.spec = spec
        dims = [spec.input_dim, *spec.hidden_layers, spec.output_dim]
        self.weights: list[ad.Tensor] = []
        self.biases: list[ad.Tensor] = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            self.weights.append(ad.Tensor(w, requires_grad=True))
            self.biases.append(ad.Tensor(np.zeros(fan_out), requires_grad=True))

    def named_params(self):
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"W{i}", w))
            out.append((f"b{i}", b))
        return out

    def forward(self, x, train=False, rng=None) -> ad.Tensor:
        h = ad.as_tensor(x)
        act = ad.relu if self.spec.activation == "relu" else ad.tanh
        n_hidden = len(self.spec.hidden_layers)
        for i in range(n_hidden):
            h = act(ad.add(ad.matmul(h, self.weights[i]), self.biases[i]))
            if train and self.spec.dropout_rate > 0.0:
                if rng is None:
                    raise ValueError("dropout in train mode needs an rng")
                keep = 1.0 - self.spec.dropout_rate
                mask = (rng.uniform(size=h.data.shape) < keep) / keep  # inverted dropout
                h = ad.mul(h, mask)
        return ad.add(ad.matmul(h, self.weights[-1]), self.biases[-1])


def _phi_tensor(kind: str, r: ad.Tensor) -> ad.Tensor:
    if kind == "logistic":
        return ad.softplus(ad.mul(r, -1.0))
    if kind == "square":
        t = ad.add(1.0, ad.mul(r, -1.0))
        return ad.mul(t, t)
    raise ValueError(f"unknown phi kind {kind!r}, expected one of {PHI_KINDS}")


@dataclass(frozen=True)
class RolloutMode:
    """How the previous-decision context is produced during training.

    teacher_forced uses the oracle bit 1[l_j >= c_j]; free_running uses the
    model's own sign; scheduled mixes them with a per-token coin whose
    teacher probability is 1.0 during warmup then decays geometrically to a
    floor: max(floor, decay^(epoch - warmup + 1)) for 0-based epochs.
    """

    variant: str = "teacher_forced"
    decay: float = 0.95
    floor: float = 0.5
    warmup_epochs: int = 5

    def __post_init__(self):
        if self.variant not in ("teacher_forced", "free_running", "scheduled"):
            raise ValueError(f"unknown rollout variant {self.variant!r}")

    def teacher_prob(self, epoch: int) -> float:
        if self.variant == "teacher_forced":
            return 1.0
        if self.variant == "free_running":
            return 0.0
        if epoch < self.warmup_epochs:
            return 1.0
        return max(self.floor, self.decay ** (epoch - self.warmup_epochs + 1))


@dataclass(frozen=True)
class TrainConfig:
    kind: str  # phi kind for token models, psi kind for one-time models
    learning_rate: float = 5e-4
    epochs: int = 200
    batch_size: int = 32
    patience: int = 20
    min_delta: float = 1e-4
    weight_decay: float = 0.005
    grad_clip_norm: float = 1.0
    seed: int = 0
    val_fraction: float = 0.2
    rollout: RolloutMode = field(default_factory=RolloutMode)

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("bad optimizer parameters")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")


def token_default_config(kind: str = "logistic", seed: int = 0) -> TrainConfig:
    return TrainConfig(kind=kind, learning_rate=1e-3, epochs=100, batch_size=32,
                       patience=7, min_delta=1e-4, weight_decay=0.001,
                       grad_clip_norm=1.0, seed=seed,
                       rollout=RolloutMode(variant="scheduled"))


def onetime_default_config(kind: str = "ce", seed: int = 0) -> TrainConfig:
    return TrainConfig(kind=kind, learning_rate=5e-4, epochs=200, batch_size=32,
                       patience=20, min_delta=1e-4, weight_decay=0.005,
                       grad_clip_norm=1.0, seed=seed)


# ---------------------------------------------------------------------------
# models


class TokenRejector:
    """Per-step keep/defer scorer; score >= 0 defers the token."""

    def __init__(self, feature_dim: int, hidden=(64,), state_dim: int = 0,
                 dropout: float = 0.4, activation: str = "relu", seed: int = 0):
        if feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        self.feature_dim = int(feature_dim)
        self.state_dim = int(state_dim)
        self.recurrent = self.state_dim > 0
        self.init_seed = int(seed)
        in_dim = self.feature_dim + 1 + self.state_dim  # features ++ prev bit ++ state
        self.trunk = MLP(MLPSpec(in_dim, tuple(hidden), 1 + self.state_dim,
                                 activation, dropout), derive_rng(seed, 0))

    def arch(self) -> dict:
        return {"feature_dim": self.feature_dim, "hidden": list(self.trunk.spec.hidden_layers),
                "state_dim": self.state_dim, "dropout": self.trunk.spec.dropout_rate,
                "activation": self.trunk.spec.activation, "seed": self.init_seed}

    def named_params(self):
        return self.trunk.named_params()

    def forward_sequence(self, feats: np.ndarray, oracle_bits: np.ndarray | None = None,
                         teacher_prob: float = 0.0, rng: np.random.Generator | None = None,
                         train: bool = False):
        """Roll the scorer over a (B, L, d) feature batch.

        Returns (score tensors per step [(B,1)], decision bits (B, L) actually
        fed forward).  teacher_prob > 0 requires oracle_bits; the per-token
        coin comes from rng.
        """
        B, L, d = feats.shape
        if d != self.feature_dim:
            raise ValueError(f"feature dim {d} != model feature_dim {self.feature_dim}")
        if teacher_prob > 0.0 and oracle_bits is None:
            raise ValueError("teacher-forced rollout needs oracle decision bits")
        prev = np.zeros((B, 1))
        state = ad.Tensor(np.zeros((B, self.state_dim))) if self.recurrent else None
        scores, decisions = [], np.zeros((B, L))
        for j in range(L):
            parts = [ad.Tensor(feats[:, j, :]), ad.Tensor(prev)]
            if self.recurrent:
                parts.append(state)
            out = self.trunk.forward(ad.concat(parts, axis=1), train=train, rng=rng)
            if self.recurrent:
                score, state_raw = ad.split(out, [1, self.state_dim], axis=1)
                state = ad.tanh(state_raw)
            else:
                score = out
            scores.append(score)
            own = (score.data[:, 0] >= 0.0).astype(float)
            if teacher_prob >= 1.0:
                bits = oracle_bits[:, j]
            elif teacher_prob <= 0.0:
                bits = own
            else:
                coins = rng.uniform(size=B) < teacher_prob
                bits = np.where(coins, oracle_bits[:, j], own)
            decisions[:, j] = bits
            prev = bits[:, None]
        return scores, decisions


class OneTimeRejector:
    """Scores every candidate handoff position at once; argmax (ties later) picks."""

    def __init__(self, input_dim: int, n_candidates: int, hidden=(8,),
                 dropout: float = 0.2, activation: str = "relu",
                 score_clamp: float = 10.0, seed: int = 0):
        if n_candidates < 2:
            raise ValueError("need at least 2 candidate positions")
        if score_clamp <= 0:
            raise ValueError("score_clamp must be positive")
        self.input_dim = int(input_dim)
        self.n_candidates = int(n_candidates)
        self.score_clamp = float(score_clamp)
        self.init_seed = int(seed)
        self.trunk = MLP(MLPSpec(input_dim, tuple(hidden), n_candidates,
                                 activation, dropout), derive_rng(seed, 0))

    def arch(self) -> dict:
        return {"input_dim": self.input_dim, "n_candidates": self.n_candidates,
                "hidden": list(self.trunk.spec.hidden_layers),
                "dropout": self.trunk.spec.dropout_rate,
                "activation": self.trunk.spec.activation,
                "score_clamp": self.score_clamp, "seed": self.init_seed}

    def named_params(self):
        return self.trunk.named_params()

    def forward(self, x: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None) -> ad.Tensor:
        raw = self.trunk.forward(x, train=train, rng=rng)
        m = self.score_clamp
        squashed = ad.mul(ad.tanh(ad.mul(raw, 1.0 / m)), m)
        # float tanh rounds to exactly 1.0 when saturated; keep |g| < M strict
        bound = m * (1.0 - 1e-9)
        return ad.clip(squashed, -bound, bound)


# ---------------------------------------------------------------------------
# batch objectives


def oracle_decision_bits(traces) -> np.ndarray:
    """Per-token oracle context: defer (1) iff the step loss >= expert cost."""
    return np.stack([t.step_losses() >= t.step_costs() for t in traces]).astype(float)


def token_feature_batch(traces) -> np.ndarray:
    return np.stack([t.feature_matrix() for t in traces])


def token_batch_loss(model: TokenRejector, traces, kind: str, teacher_prob: float = 1.0,
                     rng=None, train: bool = False) -> ad.Tensor:
    """Mean over instances of the per-step-averaged surrogate."""
    feats = token_feature_batch(traces)
    L = feats.shape[1]
    losses = np.stack([t.step_losses() for t in traces])
    costs = np.stack([t.step_costs() for t in traces])
    bits = oracle_decision_bits(traces) if teacher_prob > 0.0 else None
    scores, _ = model.forward_sequence(feats, bits, teacher_prob, rng, train)
    acc = None
    for j, r in enumerate(scores):
        term = ad.add(ad.mul(_phi_tensor(kind, r), losses[:, j:j + 1]),
                      ad.mul(_phi_tensor(kind, ad.mul(r, -1.0)), costs[:, j:j + 1]))
        acc = term if acc is None else ad.add(acc, term)
    return ad.mul(ad.mean_all(acc), 1.0 / L)


def onetime_batch_loss(model: OneTimeRejector, traces, candidates: CandidateSet | None,
                       kind: str, rng=None, train: bool = False) -> ad.Tensor:
    if kind not in PSI_KINDS:
        raise ValueError(f"unknown psi kind {kind!r}, expected one of {PSI_KINDS}")
    x = np.stack([t.x_summary for t in traces])
    w = np.stack([onetime_weights(t, candidates) for t in traces])
    g = model.forward(x, train=train, rng=rng)
    lse = ad.logsumexp(g, keepdims=True)
    sumw = w.sum(axis=1, keepdims=True)
    if kind == "ce":
        per = ad.add(ad.mul(lse, sumw), ad.mul(ad.sum_axis(ad.mul(g, w), -1), -1.0))
    else:  # mae: sum w - sum w * softmax(g)
        p = ad.exp(ad.add(g, ad.mul(lse, -1.0)))
        per = ad.add(ad.Tensor(sumw), ad.mul(ad.sum_axis(ad.mul(p, w), -1), -1.0))
    return ad.mean_all(per)


# ---------------------------------------------------------------------------
# optimizer


def _clip_scale(params, clip_norm: float) -> float:
    total = np.sqrt(sum(float(np.sum(p.grad ** 2)) for _, p in params))
    if clip_norm > 0 and total > clip_norm:
        return clip_norm / total
    return 1.0


def _sgd_step(params, lr: float, weight_decay: float, clip_norm: float) -> bool:
    """One decoupled-weight-decay GD step; returns False on an all-zero gradient
    (no update at all, so degenerate zero-weight batches leave the model alone)."""
    if all(np.all(p.grad == 0.0) for _, p in params):
        return False
    scale = _clip_scale(params, clip_norm)
    for _, p in params:
        p.data = p.data - lr * (scale * p.grad + weight_decay * p.data)
    return True


def _snapshot(params):
    return [p.data.copy() for _, p in params]


def _restore(params, snap):
    for (_, p), s in zip(params, snap):
        p.data = s.copy()


def _split_train_val(n: int, val_fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    k = int(round(val_fraction * n))
    if n > 1:
        k = min(max(k, 1), n - 1)
        return perm[k:], perm[:k]
    return perm, perm  # single instance: validate on the training point


def _train_loop(model, traces, config: TrainConfig, batch_loss, val_loss):
    """Shared trainer; batch_loss(idx, epoch, rng, train) -> Tensor."""
    if len(traces) == 0:
        raise ValueError("training needs at least one trace")
    params = model.named_params()
    rng_split = derive_rng(config.seed, 101)
    train_idx, val_idx = _split_train_val(len(traces), config.val_fraction, rng_split)
    log = []
    best_val = np.inf
    best_snap = _snapshot(params)
    patience_left = config.patience
    for epoch in range(config.epochs):
        rng = derive_rng(config.seed, 202, epoch)
        order = rng.permutation(len(train_idx))
        p_teacher = config.rollout.teacher_prob(epoch)
        epoch_losses = []
        for lo in range(0, len(order), config.batch_size):
            idx = train_idx[order[lo:lo + config.batch_size]]
            loss = batch_loss(idx, p_teacher, rng)
            loss.backward()
            _sgd_step(params, config.learning_rate, config.weight_decay,
                      config.grad_clip_norm)
            epoch_losses.append(float(loss.data))
        vl = val_loss(val_idx)
        improved = best_val - vl > config.min_delta
        if improved:
            best_val = vl
            best_snap = _snapshot(params)
            patience_left = config.patience
        else:
            patience_left -= 1
        log.append({"epoch": epoch, "train_loss": float(np.mean(epoch_losses)),
                    "val_loss": vl, "best_val": float(best_val),
                    "teacher_prob": p_teacher})
        if patience_left <= 0:
            break
    _restore(params, best_snap)
    return log


def train_token_rejector(traces, config: TrainConfig, model: TokenRejector | None = None,
                         hidden=(64,), state_dim: int = 16, dropout: float = 0.4):
    """Fit a token rejector on traces; returns (model, per-epoch log)."""
    if config.kind not in PHI_KINDS:
        raise ValueError(f"token training needs a phi kind, got {config.kind!r}")
    traces = list(traces)
    if model is None:
        feature_dim = traces[0].steps[0].features.shape[0]
        model = TokenRejector(feature_dim, hidden=hidden, state_dim=state_dim,
                              dropout=dropout, seed=config.seed)

    def batch_loss(idx, p_teacher, rng):
        batch = [traces[i] for i in idx]
        return token_batch_loss(model, batch, config.kind, p_teacher, rng, train=True)

    def val_loss(idx):
        batch = [traces[i] for i in idx]
        return float(token_batch_loss(model, batch, config.kind,
                                      teacher_prob=0.0, train=False).data)

    log = _train_loop(model, traces, config, batch_loss, val_loss)
    return model, log


def train_onetime_rejector(traces, candidates: CandidateSet | None, config: TrainConfig,
                           model: OneTimeRejector | None = None, hidden=(8,),
                           dropout: float = 0.2, score_clamp: float = 10.0):
    """Fit a one-time rejector on traces; returns (model, per-epoch log)."""
    if config.kind not in PSI_KINDS:
        raise ValueError(f"one-time training needs a psi kind, got {config.kind!r}")
    traces = list(traces)
    cand = candidates if candidates is not None else traces[0].candidates
    if model is None:
        model = OneTimeRejector(traces[0].x_summary.shape[0], len(cand), hidden=hidden,
                                dropout=dropout, score_clamp=score_clamp, seed=config.seed)

    def batch_loss(idx, p_teacher, rng):
        batch = [traces[i] for i in idx]
        return onetime_batch_loss(model, batch, cand, config.kind, rng, train=True)

    def val_loss(idx):
        batch = [traces[i] for i in idx]
        return float(onetime_batch_loss(model, batch, cand, config.kind,
                                        train=False).data)

    log = _train_loop(model, traces, config, batch_loss, val_loss)
    return model, log


# ---------------------------------------------------------------------------
# inference helpers


def token_scores(model: TokenRejector, traces, teacher_forced: bool = False) -> np.ndarray:
    """(N, L) score matrix; free-running contexts by default (deployment mode)."""
    feats = token_feature_batch(traces)
    bits = oracle_decision_bits(traces) if teacher_forced else None
    scores, _ = model.forward_sequence(feats, bits, 1.0 if teacher_forced else 0.0,
                                       rng=None, train=False)
    return np.concatenate([s.data for s in scores], axis=1)


def onetime_scores(model: OneTimeRejector, traces) -> np.ndarray:
    x = np.stack([t.x_summary for t in traces])
    return model.forward(x, train=False).data


def _member_config(config: TrainConfig, member: int) -> TrainConfig:
    return replace(config, seed=config.seed * 1000 + member)


def train_token_committee(traces, config: TrainConfig, members: int = 3,
                          **model_kwargs) -> list[TokenRejector]:
    """Train `members` token rejectors from distinct inits (seed*1000+i)."""
    if members < 1:
        raise ValueError("members must be >= 1")
    return [train_token_rejector(traces, _member_config(config, i), **model_kwargs)[0]
            for i in range(members)]


def train_onetime_committee(traces, candidates: CandidateSet | None,
                            config: TrainConfig, members: int = 3,
                            **model_kwargs) -> list[OneTimeRejector]:
    """Train `members` one-time rejectors from distinct inits (seed*1000+i)."""
    if members < 1:
        raise ValueError("members must be >= 1")
    return [train_onetime_rejector(traces, candidates, _member_config(config, i),
                                   **model_kwargs)[0]
            for i in range(members)]


def committee_token_scores(models, traces) -> np.ndarray:
    """Average the member score matrices; single-member committees pass through."""
    return np.mean([token_scores(m, traces) for m in models], axis=0)


def committee_onetime_scores(models, traces) -> np.ndarray:
    return np.mean([onetime_scores(m, traces) for m in models], axis=0)


# ---------------------------------------------------------------------------
# gradient audit


def grad_check(build_loss, params, epsilon: float = 1e-5) -> float:
    """Max discrepancy between backward() and central differences.

    Per-component error |a - n| / max(1, |a| + |n|): relative for O(1)
    gradients, absolute below that scale (central differencing cannot resolve
    components much smaller than machine_eps / epsilon anyway).
    """
    loss = build_loss()
    loss.backward()
    analytic = [p.grad.copy() for _, p in params]
    worst = 0.0
    for (_, p), a in zip(params, analytic):
        flat = p.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + epsilon
            up = float(build_loss().data)
            flat[k] = orig - epsilon
            dn = float(build_loss().data)
            flat[k] = orig
            numeric = (up - dn) / (2 * epsilon)
            ak = a.reshape(-1)[k]
            worst = max(worst, abs(ak - numeric) / max(1.0, abs(ak) + abs(numeric)))
    return worst


# ---------------------------------------------------------------------------
# model/v1 checkpoints


def _weights_dict(model) -> dict:
    return {name: p.data.reshape(-1).tolist() for name, p in model.named_params()}


def _shapes_dict(model) -> dict:
    return {name: list(p.data.shape) for name, p in model.named_params()}


def save_checkpoint(path, model, train_config: TrainConfig | None = None) -> None:
    if isinstance(model, TokenRejector):
        kind = "token"
    elif isinstance(model, OneTimeRejector):
        kind = "onetime"
    else:
        raise ValueError(f"cannot checkpoint {type(model).__name__}")
    doc = {
        "version": MODEL_SCHEMA,
        "model_kind": kind,
        "arch": model.arch(),
        "shapes": _shapes_dict(model),
        "weights": _weights_dict(model),  # row-major flattened
        "train_config": None if train_config is None else _config_dict(train_config),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def _config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["rollout"] = asdict(config.rollout)
    return d


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    roll = d.pop("rollout", None)
    rollout = RolloutMode(**roll) if roll else RolloutMode()
    return TrainConfig(rollout=rollout, **d)


def load_checkpoint(path):
    """Rebuild the exact model; returns (model, train_config | None)."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != MODEL_SCHEMA:
        raise ValueError(f"unsupported model schema {doc.get('version')!r}")
    arch = doc["arch"]
    if doc["model_kind"] == "token":
        model = TokenRejector(arch["feature_dim"], hidden=tuple(arch["hidden"]),
                              state_dim=arch["state_dim"], dropout=arch["dropout"],
                              activation=arch["activation"], seed=arch["seed"])
    elif doc["model_kind"] == "onetime":
        model = OneTimeRejector(arch["input_dim"], arch["n_candidates"],
                                hidden=tuple(arch["hidden"]), dropout=arch["dropout"],
                                activation=arch["activation"],
                                score_clamp=arch["score_clamp"], seed=arch["seed"])
    else:
        raise ValueError(f"unknown model kind {doc['model_kind']!r}")
    for name, p in model.named_params():
        flat = np.array(doc["weights"][name], dtype=np.float64)
        p.data = flat.reshape(doc["shapes"][name])
    cfg = doc.get("train_config")
    return model, (config_from_dict(cfg) if cfg else None)
