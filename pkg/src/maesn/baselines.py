"""Comparison methods built from the same estimator and optimizer stack.

* MAML: no latent; the inner loop adapts every policy parameter with a fixed step.
* latent_only: per-task latent distributions trained directly, no inner loop.
* scratch: a fresh Gaussian policy trained on one task (TRPO or REINFORCE mode).
* maml_bias_all / maml_bias_only: a deterministic learned bias input instead of
  a sampled latent, adapting bias plus weights or the bias alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

from . import envs
from .meta import MetaState, OuterConfig, TrainResult, make_policy, meta_train
from .methods import METHODS, MethodConfig

__all__ = ["METHODS", "MethodConfig", "ScratchTrace", "train_method", "train_maml", "train_latent_only",
           "train_maml_bias", "train_scratch"]


def _check(method: MethodConfig, allowed: tuple[str, ...]) -> None:
    if method.method not in allowed:
        raise ValueError(f"expected method in {allowed}, got {method.method!r}")


def train_method(method: MethodConfig, family: str, tasks: Sequence[envs.TaskSpec], outer: OuterConfig,
                 n_iters: int, seed: int, out_dir=None, **kwargs) -> TrainResult:
    """Meta-train any non-scratch method on dense-reward training tasks."""
    if method.method == "scratch":
        raise ValueError("scratch trains per task; use train_scratch")
    return meta_train(make_policy(method, family), method, tasks, outer, n_iters, seed, out_dir, **kwargs)


def train_maml(method: MethodConfig, family: str, tasks: Sequence[envs.TaskSpec], outer: OuterConfig,
               n_iters: int, seed: int, out_dir=None, **kwargs) -> TrainResult:
    _check(method, ("maml",))
    return train_method(method, family, tasks, outer, n_iters, seed, out_dir, **kwargs)


def train_latent_only(method: MethodConfig, family: str, tasks: Sequence[envs.TaskSpec], outer: OuterConfig,
                      n_iters: int, seed: int, out_dir=None, **kwargs) -> TrainResult:
    _check(method, ("latent_only",))
    return train_method(method, family, tasks, outer, n_iters, seed, out_dir, **kwargs)


def train_maml_bias(method: MethodConfig, family: str, tasks: Sequence[envs.TaskSpec], outer: OuterConfig,
                    n_iters: int, seed: int, out_dir=None, **kwargs) -> TrainResult:
    _check(method, ("maml_bias_all", "maml_bias_only"))
    return train_method(method, family, tasks, outer, n_iters, seed, out_dir, **kwargs)


@dataclass
class ScratchTrace:
    """Mean return of each iteration's batch, collected before that iteration's update."""

    returns: list[float]
    state: MetaState
    history: list[dict] = field(default_factory=list)


def train_scratch(task: envs.TaskSpec, method: MethodConfig, n_iters: int, episodes: int, seed: int,
                  optimizer: str = "trpo", delta: float = 0.01, learning_rate: float = 0.01,
                  workers: int = 1) -> ScratchTrace:
    """Train a fresh non-latent policy on one task with its own reward mode.

    ``optimizer="trpo"`` uses the trust-region step; ``"reinforce"`` takes
    plain gradient steps of size ``learning_rate``.
    """
    _check(method, ("scratch",))
    if optimizer not in ("trpo", "reinforce"):
        raise ValueError(f"optimizer must be 'trpo' or 'reinforce', got {optimizer!r}")
    outer = OuterConfig(task_batch_size=1, episodes_pre=episodes, episodes_post=episodes,
                        optimizer="trpo" if optimizer == "trpo" else "gradient", delta=delta,
                        learning_rate=learning_rate, workers=workers)
    policy = make_policy(method, task.family)
    res = meta_train(policy, method, [task], outer, n_iters, seed, reward_mode=None)
    return ScratchTrace([r["pre_return"] for r in res.history], res.state, res.history)


def with_method(method: MethodConfig, name: str, **changes) -> MethodConfig:
    """Copy of ``method`` under another method name (shared hyperparameters)."""
    return replace(method, method=name, **changes)
