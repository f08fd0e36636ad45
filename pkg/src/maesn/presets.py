"""Desk-scale settings that make the small experiments informative.

Found by sweeps on one CPU core. The navigation settings use raw (unnormalized)
advantages and the likelihood-ratio latent gradient in the inner loop: with
50-step episodes the reparameterized inner gradient is too noisy to learn from,
and normalized advantages let the pre-update latents drift from the prior.
"""

from __future__ import annotations

from dataclasses import replace

from .meta import OuterConfig
from .methods import MethodConfig

BANDIT_GOALS = ((5.0, 0.0), (-5.0, 0.0))

_BANDIT = MethodConfig("maesn", hidden_sizes=(32, 32), kl_weight=4.0, normalize_advantages=False,
                       latent_grad="likelihood_ratio", alpha_init=0.5, alpha_sigma_init=0.5)

_NAV = MethodConfig("maesn", hidden_sizes=(32, 32), init_log_std=-1.0, kl_weight=15.0, alpha_init=0.05,
                    alpha_sigma_init=0.02, latent_grad="likelihood_ratio", normalize_advantages=False,
                    metatest_normalize=False, metatest_step=1e-3)

# per-method overrides for point navigation
_NAV_OVERRIDES = {
    "maesn": {},
    "latent_only": {"metatest_step": 1e-3},
    "maml": {"alpha_init": 1e-3, "metatest_step": 2e-6},
    "scratch": {"normalize_advantages": True},
    "maml_bias_all": {},
    "maml_bias_only": {},
}

NAV_ITERS = 300
NAV_TASKS = 20
NAV_EPISODES = 10
METATEST_ITERS = 25
SCRATCH_DELTA = 0.01


def bandit_method(name: str = "maesn") -> MethodConfig:
    return replace(_BANDIT, method=name)


def bandit_outer() -> OuterConfig:
    return OuterConfig(task_batch_size=2, episodes_pre=20, episodes_post=20, delta=0.1)


def point_nav_method(name: str = "maesn") -> MethodConfig:
    return replace(_NAV, method=name, **_NAV_OVERRIDES[name])


def point_nav_outer(workers: int = 1) -> OuterConfig:
    return OuterConfig(task_batch_size=NAV_TASKS, episodes_pre=NAV_EPISODES, episodes_post=NAV_EPISODES,
                       delta=0.1, workers=workers)


def point_nav_experiment(name: str, output_dir: str, seeds, **changes) -> dict:
    """CLI config dict for the sparse point-navigation comparison."""
    m = point_nav_method(name)
    opts = {k: v for k, v in m.to_dict().items() if k not in ("method", "latent_dim")}
    cfg = {
        "method": name, "family": "point_nav", "output_dir": output_dir, "seeds": list(seeds),
        "n_train_tasks": NAV_TASKS, "n_validation_tasks": NAV_TASKS,
        "meta_iters": METATEST_ITERS + 1 if name == "scratch" else NAV_ITERS,
        "task_batch_size": NAV_TASKS, "episodes_pre": NAV_EPISODES, "episodes_post": NAV_EPISODES,
        "latent_dim": m.latent_dim, "metatest_iters": METATEST_ITERS, "metatest_episodes": NAV_EPISODES,
        "method_options": opts,
        "outer_options": {"delta": SCRATCH_DELTA if name == "scratch" else 0.1},
    }
    cfg.update(changes)
    return cfg
