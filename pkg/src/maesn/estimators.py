"""Rollouts, return statistics, policy-gradient surrogates and latent gradients."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ad, envs
from .ad import Tensor
from .policy import GaussianMLPPolicy, LatentSample, VariationalParams, gaussian_log_prob
from .rng import stream

LOG_2PI = math.log(2.0 * math.pi)
SIGMA_FLOOR = 1e-8


@dataclass
class Trajectory:
    states: np.ndarray  # (T, ds)
    actions: np.ndarray  # (T, da)
    rewards: np.ndarray  # (T,)
    z: LatentSample | None
    task_id: str

    @property
    def ret(self) -> float:
        return float(self.rewards.sum())


@dataclass
class TrajectoryBatch:
    """``E`` equal-length episodes on one task, stored as arrays."""

    task: envs.TaskSpec
    states: np.ndarray  # (E, T, ds)
    actions: np.ndarray  # (E, T, da)
    rewards: np.ndarray  # (E, T)
    logp: np.ndarray  # (E, T) action log-probs at collection time
    positions: np.ndarray  # (E, T + 1, 2) tracked body / hand positions
    z: np.ndarray | None = None  # (E, dz)
    eps: np.ndarray | None = None  # (E, dz); None when z is deterministic

    def __len__(self):
        return len(self.rewards)

    def __getitem__(self, i) -> Trajectory:
        lat = None
        if self.z is not None:
            lat = LatentSample(self.z[i], None if self.eps is None else self.eps[i])
        return Trajectory(self.states[i], self.actions[i], self.rewards[i], lat, self.task.task_id)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def task_id(self) -> str:
        return self.task.task_id

    @property
    def horizon(self) -> int:
        return self.rewards.shape[1]

    @property
    def returns(self) -> np.ndarray:
        return self.rewards.sum(axis=1)

    @classmethod
    def from_trajectories(cls, trajs: Sequence[Trajectory], task: envs.TaskSpec) -> "TrajectoryBatch":
        if not trajs:
            raise ValueError("empty trajectory batch")
        has_z = trajs[0].z is not None
        z = np.stack([t.z.z for t in trajs]) if has_z else None
        eps = None
        if has_z and trajs[0].z.epsilon is not None:
            eps = np.stack([t.z.epsilon for t in trajs])
        states = np.stack([t.states for t in trajs])
        return cls(task, states, np.stack([t.actions for t in trajs]),
                   np.stack([t.rewards for t in trajs]), np.zeros(states.shape[:2]),
                   np.zeros((len(trajs), states.shape[1] + 1, 2)), z, eps)


def as_batch(trajs, task=None) -> TrajectoryBatch:
    if isinstance(trajs, TrajectoryBatch):
        return trajs
    trajs = list(trajs)
    if not trajs:
        raise ValueError("empty trajectory batch")
    if task is None:
        task = envs.TaskSpec("point_nav", (0.0, 0.0), task_id=trajs[0].task_id,
                             horizon=len(trajs[0].rewards))
    return TrajectoryBatch.from_trajectories(trajs, task)


# ----------------------------------------------------------------------------
# rollouts


def stack_params(params_list: Sequence[dict]) -> dict:
    """Per-task parameter dicts -> one dict of ``(N, ...)`` arrays."""
    return {k: np.stack([p[k] for p in params_list]) for k in params_list[0]}


def rollout(policy: GaussianMLPPolicy, params: dict, tasks: Sequence[envs.TaskSpec],
            latents: np.ndarray | None, action_noise: np.ndarray,
            eps: np.ndarray | None = None) -> list[TrajectoryBatch]:
    """Run ``E`` episodes on each of ``N`` tasks with pre-drawn noise.

    ``params`` is shared (``W: (in, out)``) or stacked per task
    (``W: (N, in, out)``). ``latents`` is ``(N, E, dz)`` and stays fixed for
    the whole episode; ``action_noise`` is ``(N, E, T, da)``.
    """
    tasks = list(tasks)
    n, e, horizon, da = action_noise.shape
    if len(tasks) != n:
        raise ValueError(f"{len(tasks)} tasks but noise for {n}")
    rows = [t for t in tasks for _ in range(e)]
    tb = envs.TaskBatch.from_tasks(rows)
    if tb.horizon != horizon:
        raise ValueError(f"noise horizon {horizon} != task horizon {tb.horizon}")
    p = {k: ad.constant(v) for k, v in params.items()}
    log_std = np.asarray(params["log_std"])
    std = np.exp(log_std)
    std_b = std[:, None, :] if std.ndim == 2 else std
    ls_sum = log_std.sum(axis=-1)
    ls_sum_b = ls_sum[:, None] if np.ndim(ls_sum) == 1 else ls_sum

    state = envs.reset(tb)
    ds = tb.family.obs_dim
    states = np.empty((n, e, horizon, ds))
    actions = np.empty((n, e, horizon, da))
    rewards = np.empty((n, e, horizon))
    logp = np.empty((n, e, horizon))
    positions = np.empty((n, e, horizon + 1, 2))
    positions[:, :, 0] = envs.tracked_point(state, tb).reshape(n, e, 2) \
        if tb.family.name != "latent_bandit" else 0.0
    with ad.no_grad():
        for t in range(horizon):
            obs = envs.observe(state, tb).reshape(n, e, ds)
            mean = policy.mean(p, obs, latents).value
            xi = action_noise[:, :, t]
            act = mean + std_b * xi
            state, r, _ = envs.step(state, act.reshape(n * e, da), tb)
            states[:, :, t] = obs
            actions[:, :, t] = act
            rewards[:, :, t] = r.reshape(n, e)
            logp[:, :, t] = -0.5 * np.sum(xi * xi, axis=-1) - ls_sum_b - 0.5 * da * LOG_2PI
            positions[:, :, t + 1] = envs.tracked_point(state, tb).reshape(n, e, 2)
    if not np.all(np.isfinite(rewards)):
        bad = sorted({tasks[i].task_id for i in np.nonzero(~np.isfinite(rewards))[0]})
        raise FloatingPointError(f"non-finite rewards on tasks {bad}")
    out = []
    for i, task in enumerate(tasks):
        out.append(TrajectoryBatch(
            task, states[i], actions[i], rewards[i], logp[i], positions[i],
            None if latents is None else np.array(latents[i]),
            None if eps is None else np.array(eps[i])))
    return out


def draw_noise(rng: np.random.Generator, n_episodes: int, horizon: int, action_dim: int,
               latent_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Latent eps ``(E, dz)`` then action noise ``(E, T, da)`` from one stream."""
    eps = rng.standard_normal((n_episodes, latent_dim))
    xi = rng.standard_normal((n_episodes, horizon, action_dim))
    return eps, xi


def collect(policy: GaussianMLPPolicy, params: dict, vp: VariationalParams | None,
            task: envs.TaskSpec, n_episodes: int, rng_seed, latent: np.ndarray | None = None
            ) -> TrajectoryBatch:
    """Collect ``n_episodes`` on one task, one fresh ``z`` per episode.

    ``vp=None`` runs without a sampled latent: either no latent at all, or the
    fixed ``latent`` vector when given (bias-transformation policies and
    fixed-z ablations).
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else stream(int(rng_seed), "collect")
    dz = policy.latent_dim
    eps, xi = draw_noise(rng, n_episodes, task.horizon, policy.action_dim, dz)
    z = None
    if vp is not None:
        z = vp.mu + np.exp(vp.log_sigma) * eps
    elif latent is not None:
        z = np.broadcast_to(np.asarray(latent, dtype=np.float64), (n_episodes, dz)).copy()
        eps = None
    else:
        eps = None
    try:
        return rollout(policy, params, [task], None if z is None else z[None],
                       xi[None], None if eps is None else eps[None])[0]
    except (ValueError, FloatingPointError) as exc:
        raise type(exc)(f"task {task.task_id}: {exc}") from exc


# ----------------------------------------------------------------------------
# returns, baselines, advantages


def returns_to_go(rewards: np.ndarray, gamma: float = 1.0) -> np.ndarray:
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(rewards)
    acc = np.zeros(rewards.shape[:-1])
    for t in range(rewards.shape[-1] - 1, -1, -1):
        acc = rewards[..., t] + gamma * acc
        out[..., t] = acc
    return out


def baseline_fit(batch, kind: str = "time_mean", gamma: float = 1.0, reg: float = 1e-5) -> np.ndarray:
    """Baseline values ``(E, T)``.

    ``time_mean``: mean return-to-go across the batch at each time step.
    ``linear``: ridge regression of return-to-go on (state, time) features.
    """
    batch = as_batch(batch)
    if len(batch) < 2:
        raise ValueError("baseline_fit needs at least 2 trajectories")
    rtg = returns_to_go(batch.rewards, gamma)
    if kind == "time_mean":
        return np.broadcast_to(rtg.mean(axis=0), rtg.shape).copy()
    if kind == "linear":
        e, t = rtg.shape
        s = np.clip(batch.states, -10, 10)
        tt = np.broadcast_to((np.arange(t) / 100.0)[None, :, None], (e, t, 1))
        feats = np.concatenate([s, s * s, tt, tt ** 2, tt ** 3, np.ones((e, t, 1))], axis=-1)
        x = feats.reshape(e * t, -1)
        y = rtg.reshape(-1)
        coef = np.linalg.solve(x.T @ x + reg * np.eye(x.shape[1]), x.T @ y)
        return (x @ coef).reshape(e, t)
    raise ValueError(f"unknown baseline kind {kind!r}")


@dataclass
class ReturnStats:
    returns: np.ndarray  # (E,)
    baseline: np.ndarray  # (E, T)
    advantages: np.ndarray  # (E, T)
    eta: float  # mean return


def compute_advantages(batch, gamma: float = 1.0, baseline: str | None = "time_mean",
                       normalize: bool = True) -> ReturnStats:
    batch = as_batch(batch)
    rtg = returns_to_go(batch.rewards, gamma)
    b = np.zeros_like(rtg) if baseline is None else baseline_fit(batch, baseline, gamma)
    adv = rtg - b
    if normalize:
        adv = adv - adv.mean()
        sd = adv.std()
        if sd > 1e-12:
            adv = adv / sd
        else:
            adv = np.zeros_like(adv)
    return ReturnStats(batch.returns.copy(), b, adv, float(batch.returns.mean()))


# ----------------------------------------------------------------------------
# graph construction shared by inner and outer objectives


@dataclass
class Stacked:
    """``N`` task batches flattened to rows for one graph."""

    states: np.ndarray  # (N, E*T, ds)
    actions: np.ndarray  # (N, E*T, da)
    adv: np.ndarray  # (N, E*T)
    adv_first: np.ndarray  # (N, E): advantage at t=0 (whole-episode credit for z)
    logp_old: np.ndarray  # (N, E*T)
    z: np.ndarray | None  # (N, E, dz)
    eps: np.ndarray | None  # (N, E, dz)
    n_episodes: int
    horizon: int

    @property
    def n_tasks(self) -> int:
        return self.states.shape[0]


def stack(batches: Sequence[TrajectoryBatch], advantages: Sequence[np.ndarray]) -> Stacked:
    batches = list(batches)
    if not batches:
        raise ValueError("empty trajectory batch")
    e, t = batches[0].rewards.shape
    for b in batches:
        if b.rewards.shape != (e, t):
            raise ValueError("stacked batches must share episode count and horizon")
    adv = np.stack([np.asarray(a, dtype=np.float64) for a in advantages])
    z = None if batches[0].z is None else np.stack([b.z for b in batches])
    eps = None if batches[0].eps is None else np.stack([b.eps for b in batches])
    return Stacked(
        states=np.stack([b.states.reshape(e * t, -1) for b in batches]),
        actions=np.stack([b.actions.reshape(e * t, -1) for b in batches]),
        adv=adv.reshape(len(batches), e * t),
        adv_first=adv[:, :, 0].copy(),
        logp_old=np.stack([b.logp.reshape(-1) for b in batches]),
        z=z, eps=eps, n_episodes=e, horizon=t)


def latent_episodes(data: Stacked, mu: Tensor | None = None, log_sigma: Tensor | None = None,
                    mode: str = "reparam") -> Tensor | None:
    """Per-episode latents ``(N, E, dz)`` as graph nodes.

    ``reparam`` rebuilds ``z = mu + exp(log_sigma) * eps`` from the stored
    noise so gradients reach ``(mu, log_sigma)`` through the sample;
    ``likelihood_ratio`` and ``fixed`` use the stored ``z`` as a constant.
    ``bias`` broadcasts a deterministic ``mu`` to every episode.
    """
    n, e = data.n_tasks, data.n_episodes
    if mode == "reparam":
        dz = mu.shape[-1]
        m = ad.reshape(mu, (n, 1, dz))
        s = ad.reshape(ad.exp(log_sigma), (n, 1, dz))
        return m + s * data.eps
    if mode == "bias":
        dz = mu.shape[-1]
        return ad.broadcast_to(ad.reshape(mu, (n, 1, dz)), (n, e, dz))
    if mode in ("likelihood_ratio", "fixed"):
        return None if data.z is None else ad.constant(data.z)
    if mode == "none":
        return None
    raise ValueError(f"unknown latent mode {mode!r}")


def latent_rows(z_ep: Tensor | None, horizon: int) -> Tensor | None:
    """Repeat each episode's latent for every step: ``(N, E, dz) -> (N, E*T, dz)``."""
    if z_ep is None:
        return None
    n, e, dz = z_ep.shape
    x = ad.broadcast_to(ad.reshape(z_ep, (n, e, 1, dz)), (n, e, horizon, dz))
    return ad.reshape(x, (n, e * horizon, dz))


def latent_log_density(z, mu: Tensor, log_sigma: Tensor) -> Tensor:
    """``log N(z; mu, sigma)`` per episode, ``z: (N, E, dz)`` -> ``(N, E)``."""
    n, dz = mu.shape
    return gaussian_log_prob(z, ad.reshape(mu, (n, 1, dz)), ad.reshape(log_sigma, (n, 1, dz)))


def policy_log_prob(policy: GaussianMLPPolicy, params: dict[str, Tensor], data: Stacked,
                    z_ep: Tensor | None) -> Tensor:
    return policy.log_prob(params, data.states, latent_rows(z_ep, data.horizon), data.actions)


def reinforce_surrogate(policy: GaussianMLPPolicy, params: dict[str, Tensor], data: Stacked,
                        mu: Tensor | None = None, log_sigma: Tensor | None = None,
                        latent_mode: str = "reparam") -> Tensor:
    """Scalar whose gradient is the REINFORCE estimate for every task.

    Per task: ``mean_e sum_t log pi(a_t | s_t, z_e) A_t``; summed over tasks so
    gradients with respect to per-task (stacked) parameters stay separate. In
    ``likelihood_ratio`` mode the latent score ``log q(z_e) A_e0`` is added
    once per episode.
    """
    if data.states.shape[1] == 0:
        raise ValueError("empty trajectory batch")
    z_ep = latent_episodes(data, mu, log_sigma, latent_mode)
    lp = policy_log_prob(policy, params, data, z_ep)
    e = data.n_episodes
    s = ad.sum(lp * data.adv) * (1.0 / e)
    if latent_mode == "likelihood_ratio" and mu is not None:
        lq = latent_log_density(data.z, mu, log_sigma)
        s = s + ad.sum(lq * data.adv_first) * (1.0 / e)
    return s


def likelihood_ratio_grad(trajs, vp: VariationalParams, baseline: bool = True
                          ) -> tuple[np.ndarray, np.ndarray]:
    """Score-function gradient of mean return w.r.t. ``(mu, log_sigma)``.

    ``grad_mu = mean((R - b) (z - mu) / sigma^2)`` and
    ``grad_log_sigma = mean((R - b) ((z - mu)^2 / sigma^2 - 1))``.
    """
    batch = as_batch(trajs)
    if batch.z is None:
        raise ValueError("trajectories carry no latent samples")
    sigma = np.exp(vp.log_sigma)
    if np.any(sigma < SIGMA_FLOOR):
        raise ValueError(f"sigma below {SIGMA_FLOOR}: likelihood-ratio variance is unbounded")
    r = batch.returns
    w = r - r.mean() if baseline else r
    u = (batch.z - vp.mu) / sigma
    g_mu = np.mean(w[:, None] * u / sigma, axis=0)
    g_ls = np.mean(w[:, None] * (u * u - 1.0), axis=0)
    return g_mu, g_ls


def kl_to_prior(vp: VariationalParams) -> float:
    """``KL(N(mu, sigma) || N(0, I)) = 1/2 sum(mu^2 + sigma^2 - 1 - log sigma^2)``."""
    mu, ls = vp.mu, vp.log_sigma
    return float(0.5 * np.sum(mu * mu + np.exp(2.0 * ls) - 1.0 - 2.0 * ls))


def kl_to_prior_t(mu: Tensor, log_sigma: Tensor) -> Tensor:
    """Graph version; sums over the last axis, so ``(N, dz)`` gives ``(N,)``."""
    t = ad.square(mu) + ad.exp(ad.mul(2.0, log_sigma)) - 1.0 - ad.mul(2.0, log_sigma)
    return ad.mul(0.5, ad.sum(t, axis=-1))


# ----------------------------------------------------------------------------
# dumps


def dump_trajectories(path, batches: Sequence[TrajectoryBatch]) -> None:
    """JSON Lines, one episode per line."""
    with open(path, "w") as fh:
        for b in batches:
            for i in range(len(b)):
                rec = {
                    "task_id": b.task_id,
                    "z": None if b.z is None else b.z[i].tolist(),
                    "states": b.states[i].tolist(),
                    "actions": b.actions[i].tolist(),
                    "rewards": b.rewards[i].tolist(),
                    "positions": b.positions[i].tolist(),
                }
                fh.write(json.dumps(rec) + "\n")


def load_trajectories(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def endpoint_dispersion(batch: TrajectoryBatch) -> float:
    """Mean pairwise distance between final positions."""
    end = batch.positions[:, -1]
    d = np.linalg.norm(end[:, None, :] - end[None, :, :], axis=-1)
    n = len(end)
    return float(d.sum() / (n * (n - 1))) if n > 1 else 0.0
