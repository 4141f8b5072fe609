"""Desk-scale task worlds that emit deferral traces.

Each task adapter owns a synthetic (or file-backed) world, a cheap model that
rolls sequences out on its own, and a stronger expert.  build_dataset returns
ready-made traces on the full handoff-candidate grid; everything downstream
(rejectors, baselines, curves) is task-agnostic.

Adapters also advertise their capabilities: which confidence kind the task
records natively, whether per-step entropies exist, whether token-level
deferral is meaningful, and an optional per-instance loss transform used when
plotting curves.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from ..core import ConfigError, TaskBounds


def standardize_splits(train: list, test: list) -> tuple[list, list]:
    """Z-score step features and x_summary using training-split statistics.

    Losses, costs, confidences, and all loss tables are untouched; only the
    rejector inputs are rescaled so one learning rate fits every column.
    Near-constant columns keep their raw values (scale floor 1e-8).
    """
    F = np.concatenate([t.feature_matrix() for t in train], axis=0)
    mu, sd = F.mean(axis=0), F.std(axis=0)
    sd = np.where(sd < 1e-8, 1.0, sd)
    S = np.stack([t.x_summary for t in train])
    smu, ssd = S.mean(axis=0), S.std(axis=0)
    ssd = np.where(ssd < 1e-8, 1.0, ssd)

    def rescale(traces):
        out = []
        for t in traces:
            steps = tuple(dataclasses.replace(s, features=(s.features - mu) / sd)
                          for s in t.steps)
            out.append(dataclasses.replace(t, steps=steps,
                                           x_summary=(t.x_summary - smu) / ssd))
        return out

    return rescale(train), rescale(test)


class TaskAdapter:
    """Shared surface for task worlds; subclasses fill in the world logic."""

    name: str = "base"
    conf_kind: str = "neg_log_prob"
    has_entropy: bool = False
    token_mode: str | None = None  # "static", "reroll", or None if unsupported
    L: int = 0

    def bounds(self) -> TaskBounds | None:
        return None

    def build_dataset(self, n_train: int, n_test: int, seed: int):
        raise NotImplementedError

    def curve_transform(self):
        """Optional per-instance affine map applied to pooled losses."""
        return None

    def token_reroll(self, traces):
        """Optional callable(mask) -> per-instance losses re-running the model
        with expert outputs substituted at deferred positions."""
        return None

    def train_recipe(self, view: str, seed: int) -> dict:
        """Trainer settings that work well on this task.

        Returns {"config": TrainConfig, "arch": kwargs for the trainer,
        "members": committee size}; scores from committee members are averaged
        before thresholding.  Subclasses override with tuned values.
        """
        from ..rejectors import onetime_default_config, token_default_config

        if view == "token":
            return {"config": token_default_config(seed=seed), "arch": {}, "members": 1}
        if view == "onetime":
            return {"config": onetime_default_config(seed=seed), "arch": {}, "members": 1}
        raise ConfigError(f"unknown rejector view {view!r}")

    def describe(self) -> dict:
        return {"task": self.name, "conf_kind": self.conf_kind, "L": self.L}


def make_task(name: str, **params) -> TaskAdapter:
    from .mwp import MWPTask
    from .text import TextTask
    from .tsp import TSPTask

    registry = {"tsp": TSPTask, "mwp": MWPTask, "text": TextTask}
    if name not in registry:
        raise ConfigError(f"unknown task {name!r}; expected one of {sorted(registry)}")
    try:
        return registry[name](**params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for task {name!r}: {exc}") from None


def phase_features(t: int, period: int) -> tuple[float, float]:
    ang = 2.0 * np.pi * (t % period) / period
    return float(np.sin(ang)), float(np.cos(ang))
