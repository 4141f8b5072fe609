"""Scalar forecasting task: short-horizon prediction with a noisy-oracle expert.

The world is an AR(2) process riding on a daily sinusoid (period 144 ticks),
with a per-instance innovation scale drawn log-uniformly — some series are
nearly deterministic, others noisy, and the noise level is visible in the
history residuals.  An instance shows 12 history values and asks for the next
6.  The model is one global AR(2)-plus-intercept least-squares fit pooled over
training histories, rolled out autoregressively.  The expert reports the truth
plus small Gaussian noise (a much better forecaster at a price).

Per-step losses are squared errors; the confidence score is the Monte-Carlo
variance of residual-bootstrap rollouts (no predictive distribution exists, so
there are no per-step entropies).  Instances can also be cut from a real
single-column CSV series via sliding windows.
"""

from __future__ import annotations

import numpy as np

from ..core import (
    CandidateSet,
    CostSchedule,
    DataError,
    StepRecord,
    TaskBounds,
    Trace,
    derive_rng,
)
from . import TaskAdapter, standardize_splits

HISTORY = 12
HORIZON = 6
PERIOD = 144


def local_drift(histories: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Quadratic trend fit per history row, anchored at the last tick.

    Fits y_t ~ b0 + b1*(t-T+1) + b2*(t-T+1)^2 so that b1 is the slope and
    2*b2 the curvature at the forecast origin.  Returns (slope, curvature,
    residual rms) arrays of shape (n,).  These summarize the smooth local
    motion the pooled dynamics model cannot see, and work for observed
    series just as well as for simulated ones.
    """
    histories = np.asarray(histories, dtype=np.float64)
    if histories.ndim != 2 or histories.shape[1] < 3:
        raise ValueError("need a (n_instances, >=3) history matrix")
    T = histories.shape[1]
    t = np.arange(T, dtype=np.float64) - (T - 1)
    X = np.stack([np.ones(T), t, t * t], axis=1)
    beta, *_ = np.linalg.lstsq(X, histories.T, rcond=None)
    fit = X @ beta
    resid = np.sqrt(np.mean((histories.T - fit) ** 2, axis=0))
    return beta[1], 2.0 * beta[2], resid


def fit_ar2(histories: np.ndarray) -> np.ndarray:
    """Pooled least-squares fit of y_t ~ [1, y_{t-1}, y_{t-2}] over all rows.

    Returns (intercept, lag1, lag2).  Uses the minimum-norm solution, so
    degenerate designs (e.g. constant series) still fit exactly.
    """
    histories = np.asarray(histories, dtype=np.float64)
    if histories.ndim != 2 or histories.shape[1] < 3:
        raise ValueError("need a (n_instances, >=3) history matrix")
    if not np.all(np.isfinite(histories)):
        raise ValueError("histories must be finite")
    T = histories.shape[1]
    ys, xs = [], []
    for t in range(2, T):
        ys.append(histories[:, t])
        xs.append(np.stack([np.ones(len(histories)), histories[:, t - 1],
                            histories[:, t - 2]], axis=1))
    y = np.concatenate(ys)
    X = np.concatenate(xs, axis=0)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    return coef


def ar2_rollout(coef: np.ndarray, last: np.ndarray, prev: np.ndarray,
                horizon: int) -> np.ndarray:
    """Recursive point forecasts; columns are steps 1..horizon."""
    b0, a1, a2 = coef
    c1 = np.array(last, dtype=np.float64, copy=True)
    c2 = np.array(prev, dtype=np.float64, copy=True)
    out = np.empty((len(c1), horizon))
    for j in range(horizon):
        pred = b0 + a1 * c1 + a2 * c2
        out[:, j] = pred
        c2 = c1
        c1 = pred
    return out


def history_residuals(coef: np.ndarray, histories: np.ndarray) -> np.ndarray:
    b0, a1, a2 = coef
    h = np.asarray(histories, dtype=np.float64)
    return h[:, 2:] - (b0 + a1 * h[:, 1:-1] + a2 * h[:, :-2])


def bootstrap_variance(coef: np.ndarray, histories: np.ndarray, horizon: int,
                       draws: int, rng) -> np.ndarray:
    """Per-step forecast variance from residual-bootstrap rollouts.

    Each draw re-runs the fitted recursion adding a residual resampled from
    the instance's own history errors, so noisy instances get wide fans.
    """
    b0, a1, a2 = coef
    res = history_residuals(coef, histories)
    n, k = res.shape
    c1 = np.repeat(histories[:, -1][:, None], draws, axis=1)
    c2 = np.repeat(histories[:, -2][:, None], draws, axis=1)
    out = np.empty((n, horizon))
    rows = np.arange(n)[:, None]
    for j in range(horizon):
        picks = rng.integers(0, k, size=(n, draws))
        pred = b0 + a1 * c1 + a2 * c2 + res[rows, picks]
        out[:, j] = np.var(pred, axis=1)
        c2 = c1
        c1 = pred
    return out


def simulate_world(n_instances: int, rng, sigma_lo: float, sigma_hi: float,
                   ar=(1.1, -0.3), amplitude: float = 1.0, burn_in: int = 60):
    """Sample (series, sigma) pairs; each series has HISTORY+HORIZON values."""
    T = HISTORY + HORIZON
    sigmas = np.exp(rng.uniform(np.log(sigma_lo), np.log(sigma_hi), size=n_instances))
    phases = rng.integers(0, PERIOD, size=n_instances)
    a1, a2 = ar
    u = np.zeros((n_instances, 2))
    for _ in range(burn_in):
        eps = rng.normal(size=n_instances) * sigmas
        new = a1 * u[:, 1] + a2 * u[:, 0] + eps
        u = np.stack([u[:, 1], new], axis=1)
    series = np.empty((n_instances, T))
    for t in range(T):
        eps = rng.normal(size=n_instances) * sigmas
        new = a1 * u[:, 1] + a2 * u[:, 0] + eps
        u = np.stack([u[:, 1], new], axis=1)
        ang = 2.0 * np.pi * ((phases + t) % PERIOD) / PERIOD
        series[:, t] = amplitude * np.sin(ang) + new
    return series, sigmas, phases


def load_series_csv(path) -> np.ndarray:
    """Single numeric column, optional header row; returns the series."""
    values = []
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataError(f"{path}: empty file")
    start = 0
    first = lines[0].split(",")[0].strip()
    try:
        float(first)
    except ValueError:
        start = 1  # header row
    for i, line in enumerate(lines[start:], start=start + 1):
        if not line.strip():
            continue
        cell = line.split(",")[0].strip()
        try:
            values.append(float(cell))
        except ValueError:
            raise DataError(f"{path}: row {i}: could not parse {cell!r} as a number")
    if len(values) < HISTORY + HORIZON:
        raise DataError(f"{path}: need at least {HISTORY + HORIZON} rows, got {len(values)}")
    arr = np.array(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{path}: series contains non-finite values")
    return arr


def windows_from_series(series: np.ndarray, stride: int = HORIZON) -> np.ndarray:
    T = HISTORY + HORIZON
    n = 1 + (len(series) - T) // stride
    return np.stack([series[i * stride:i * stride + T] for i in range(n)])


class MWPTask(TaskAdapter):
    name = "mwp"
    conf_kind = "mc_variance"
    has_entropy = False
    token_mode = "reroll"
    L = HORIZON

    def __init__(self, alpha1: float = 0.8, sigma_lo: float = 0.02,
                 sigma_hi: float = 0.6, expert_noise: float = 0.05,
                 amplitude: float = 2.0, bootstrap_draws: int = 16, csv_path=None,
                 csv_stride: int = HORIZON):
        if alpha1 < 0:
            raise ValueError("alpha1 must be >= 0")
        if not (0 < sigma_lo <= sigma_hi):
            raise ValueError("need 0 < sigma_lo <= sigma_hi")
        if bootstrap_draws < 2:
            raise ValueError("bootstrap_draws must be >= 2")
        if amplitude < 0:
            raise ValueError("amplitude must be >= 0")
        if csv_stride < 1:
            raise ValueError("csv_stride must be >= 1")
        self.alpha1 = float(alpha1)
        self.sigma_lo = float(sigma_lo)
        self.sigma_hi = float(sigma_hi)
        self.expert_noise = float(expert_noise)
        self.amplitude = float(amplitude)
        self.bootstrap_draws = int(bootstrap_draws)
        self.csv_path = csv_path
        self.csv_stride = int(csv_stride)
        self._cache = {}

    def bounds(self) -> TaskBounds:
        return TaskBounds(loss_max=np.inf, cost_min=0.0, cost_max=np.inf)

    def train_recipe(self, view: str, seed: int) -> dict:
        from ..rejectors import RolloutMode, TrainConfig

        if view == "token":
            cfg = TrainConfig(kind="square", learning_rate=3e-3, epochs=400,
                              batch_size=32, patience=40, min_delta=1e-4,
                              weight_decay=1e-4, grad_clip_norm=1.0, seed=seed,
                              rollout=RolloutMode(variant="scheduled"))
            return {"config": cfg,
                    "arch": {"state_dim": 0, "dropout": 0.0, "hidden": (64,)},
                    "members": 3}
        if view == "onetime":
            cfg = TrainConfig(kind="ce", learning_rate=3e-3, epochs=500,
                              batch_size=32, patience=50, min_delta=1e-4,
                              weight_decay=1e-4, grad_clip_norm=1.0, seed=seed)
            return {"config": cfg,
                    "arch": {"hidden": (32, 16), "dropout": 0.0},
                    "members": 3}
        return super().train_recipe(view, seed)

    def _instance_matrix(self, n_total: int, seed: int):
        if self.csv_path is not None:
            series = load_series_csv(self.csv_path)
            wins = windows_from_series(series, stride=self.csv_stride)
            if len(wins) < n_total:
                raise DataError(
                    f"{self.csv_path}: only {len(wins)} windows available, "
                    f"need {n_total}")
            order = derive_rng(9102, seed).permutation(len(wins))[:n_total]
            return wins[order]
        series, _, _ = simulate_world(n_total, derive_rng(9101, seed),
                                      self.sigma_lo, self.sigma_hi,
                                      amplitude=self.amplitude)
        return series

    def build_dataset(self, n_train: int, n_test: int, seed: int):
        data = self._instance_matrix(n_train + n_test, seed)
        hist, targets = data[:, :HISTORY], data[:, HISTORY:]
        coef = fit_ar2(hist[:n_train])
        pooled_std = float(np.std(data[:n_train]))
        sigma_e = self.expert_noise * max(pooled_std, 1e-12)
        rng = derive_rng(9103, seed)
        preds = ar2_rollout(coef, hist[:, -1], hist[:, -2], HORIZON)
        conf = bootstrap_variance(coef, hist, HORIZON, self.bootstrap_draws, rng)
        experts = targets + sigma_e * rng.normal(size=targets.shape)
        innov = np.sqrt(np.mean(history_residuals(coef, hist) ** 2, axis=1))
        traces = []
        schedule = CostSchedule(self.alpha1, HORIZON)
        price = schedule.per_token
        cand = CandidateSet.full(HORIZON)
        slope, curv, trend_rms = local_drift(hist)
        for i in range(len(data)):
            iid = f"mwp-{seed}-{i}"
            losses = (preds[i] - targets[i]) ** 2
            costs = (experts[i] - targets[i]) ** 2 + price
            steps = tuple(
                StepRecord(
                    j=j,
                    model_pred=float(preds[i, j - 1]),
                    expert_pred=float(experts[i, j - 1]),
                    model_loss=float(losses[j - 1]),
                    expert_cost=float(costs[j - 1]),
                    conf_score=float(conf[i, j - 1]),
                    features=np.array([preds[i, j - 1], conf[i, j - 1], j / HORIZON,
                                       innov[i],
                                       slope[i] * j + 0.5 * curv[i] * j * j,
                                       slope[i], curv[i]]),
                )
                for j in range(1, HORIZON + 1)
            )
            cum = np.concatenate([[0.0], np.cumsum(losses)])
            suffix = np.concatenate([np.cumsum(costs[::-1])[::-1], [0.0]])
            x_summary = np.array([
                np.mean(hist[i]), np.std(hist[i]), innov[i], hist[i, -1],
                slope[i], curv[i], trend_rms[i],
            ])
            traces.append(Trace(
                instance_id=iid,
                x_summary=x_summary,
                steps=steps,
                candidates=cand,
                prefix_losses=cum[:HORIZON + 1] * 1.0,
                onetime_costs=suffix,
                expert_full_loss=float(suffix[0]),
                model_full_loss=float(cum[-1]),
            ))
            self._cache[iid] = {
                "targets": targets[i].copy(), "experts": experts[i].copy(),
                "coef": coef, "last": float(hist[i, -1]), "prev": float(hist[i, -2]),
            }
        return standardize_splits(traces[:n_train], traces[n_train:])

    def token_reroll(self, traces):
        """Re-run the AR recursion feeding expert values back in when deferred."""
        missing = [t.instance_id for t in traces if t.instance_id not in self._cache]
        if missing:
            raise ValueError(f"reroll needs traces built by this adapter; unknown ids "
                             f"{missing[:3]}")
        info = [self._cache[t.instance_id] for t in traces]
        targets = np.stack([d["targets"] for d in info])
        experts = np.stack([d["experts"] for d in info])
        coef = info[0]["coef"]
        b0, a1, a2 = coef
        c1_0 = np.array([d["last"] for d in info])
        c2_0 = np.array([d["prev"] for d in info])
        price = CostSchedule(self.alpha1, HORIZON).per_token

        def reroll(mask):
            mask = np.asarray(mask, dtype=bool)
            c1, c2 = c1_0.copy(), c2_0.copy()
            total = np.zeros(len(info))
            for j in range(HORIZON):
                pred = b0 + a1 * c1 + a2 * c2
                out = np.where(mask[:, j], experts[:, j], pred)
                loss = np.where(mask[:, j],
                                (experts[:, j] - targets[:, j]) ** 2 + price,
                                (pred - targets[:, j]) ** 2)
                total += loss
                c2 = c1
                c1 = out
            return total

        return reroll

    def describe(self) -> dict:
        return {"task": self.name, "conf_kind": self.conf_kind, "L": self.L,
                "alpha1": self.alpha1, "sigma_lo": self.sigma_lo,
                "sigma_hi": self.sigma_hi, "expert_noise": self.expert_noise,
                "amplitude": self.amplitude,
                "csv": str(self.csv_path) if self.csv_path else None,
                "csv_stride": self.csv_stride}
