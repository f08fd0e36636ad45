"""Outer loop: two-level objective, trust-region meta-update, and training driver.

One meta-iteration samples a batch of training tasks, collects pre-update
episodes, applies the differentiable inner update, collects post-update
episodes under the adapted parameters, and takes one KL-constrained step on
every meta-parameter (policy weights, the batch's variational parameters,
step sizes, bias vector) at once.

All meta-parameters live in one flat vector; the Fisher metric is the
Hessian of the mean action-distribution KL on the post-update batch, applied
as ``J^T M J v`` with a forward sweep (``J v``) followed by a reverse sweep.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import ad, envs
from .ad import Tensor
from .estimators import (Stacked, TrajectoryBatch, compute_advantages, draw_noise, kl_to_prior,
                         kl_to_prior_t, latent_episodes, latent_rows, rollout, stack)
from .inner import AdaptedParams, inner_update
from .methods import MethodConfig
from .policy import (LOG_STD_MAX, LOG_STD_MIN, GaussianMLPPolicy, StepSizes, VariationalParams,
                     gaussian_kl, gaussian_log_prob, load_params, save_params)
from .rng import stream

LOG = logging.getLogger(__name__)

METRIC_FIELDS = ("iteration", "pre_return", "post_return", "kl_sum", "accepted", "mode", "step", "action_kl")
VP_FORMAT = "maesn-vp"


@dataclass
class OuterConfig:
    """Batch sizes and optimizer settings for the outer loop."""

    task_batch_size: int = 20
    episodes_pre: int = 20
    episodes_post: int = 20
    optimizer: str = "trpo"  # or "gradient" (plain ascent with ``learning_rate``)
    delta: float = 0.01
    cg_iters: int = 10
    cg_damping: float = 0.1
    cg_tol: float = 0.5  # relative residual counted as converged
    max_backtracks: int = 10
    backtrack_ratio: float = 0.5
    fallback_lr: float = 0.01
    learning_rate: float = 0.01
    workers: int = 1

    def __post_init__(self):
        if self.optimizer not in ("trpo", "gradient"):
            raise ValueError(f"optimizer must be 'trpo' or 'gradient', got {self.optimizer!r}")
        for name in ("task_batch_size", "episodes_pre", "episodes_post", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.episodes_pre < 2 or self.episodes_post < 2:
            raise ValueError("baselines need at least 2 episodes per task")


@dataclass
class MetaState:
    theta: dict[str, np.ndarray]
    vp_all: dict[str, VariationalParams]  # empty for methods without a sampled latent
    steps: StepSizes | None
    bias: np.ndarray | None
    iteration: int = 0
    kl_weight: float = 1.0

    def copy(self) -> "MetaState":
        steps = None
        if self.steps is not None:
            steps = StepSizes.from_flat({k: np.array(v) for k, v in self.steps.as_dict().items()})
        return MetaState({k: v.copy() for k, v in self.theta.items()},
                         {k: v.copy() for k, v in self.vp_all.items()}, steps,
                         None if self.bias is None else self.bias.copy(), self.iteration, self.kl_weight)

    def mean_kl_to_prior(self) -> float:
        if not self.vp_all:
            return 0.0
        return float(np.mean([kl_to_prior(vp) for vp in self.vp_all.values()]))


@dataclass
class MetaObjective:
    post_surrogate: Tensor  # mean over the batch of the post-update surrogate
    kl: Tensor  # mean KL(q_i || prior) over the batch
    total: Tensor  # post_surrogate - kl_weight * kl


def make_policy(method: MethodConfig, family: str) -> GaussianMLPPolicy:
    fam = envs.get_family(family)
    return GaussianMLPPolicy(fam.obs_dim, fam.action_dim, method.policy_latent_dim, method.hidden_sizes)


def init_state(policy: GaussianMLPPolicy, method: MethodConfig, tasks: Sequence[envs.TaskSpec],
               seed: int) -> MetaState:
    theta = policy.init_params(stream(seed, "init"), init_log_std=method.init_log_std)
    dz = method.latent_dim
    vp_all = {}
    if method.latent_kind == "sampled":
        vp_all = {t.task_id: VariationalParams.prior(dz) for t in tasks}
        if len(vp_all) != len(tasks):
            raise ValueError("training task ids must be unique")
    steps = None
    if method.learned_steps:
        wants_theta = (method.method == "maml_bias_all" or method.include_theta
                       or method.stagewise_theta_iter is not None)
        steps = StepSizes.init(dz, method.alpha_init,
                               policy.param_shapes() if wants_theta else None, method.alpha_theta_init,
                               method.alpha_sigma_init)
    bias = np.zeros(dz) if method.latent_kind == "bias" else None
    return MetaState(theta, vp_all, steps, bias, 0, method.kl_weight)


# ----------------------------------------------------------------------------
# flat meta-parameter vector


class ParamSpace:
    """Ordered named arrays <-> one flat vector."""

    def __init__(self, shapes: dict[str, tuple[int, ...]]):
        self.names = list(shapes)
        self.shapes = {k: tuple(s) for k, s in shapes.items()}
        self.sizes = [int(np.prod(self.shapes[k])) for k in self.names]
        self.size = int(sum(self.sizes))

    @classmethod
    def of(cls, values: dict) -> "ParamSpace":
        return cls({k: np.shape(v) for k, v in values.items()})

    def flatten(self, values: dict) -> np.ndarray:
        if not self.names:
            return np.zeros(0)
        return np.concatenate([np.asarray(values[k], dtype=np.float64).ravel() for k in self.names])

    def unflatten(self, x: np.ndarray) -> dict[str, np.ndarray]:
        out, i = {}, 0
        for k, n in zip(self.names, self.sizes):
            out[k] = np.array(x[i:i + n]).reshape(self.shapes[k])
            i += n
        return out


def meta_values(policy: GaussianMLPPolicy, method: MethodConfig, state: MetaState,
                batch_ids: Sequence[str], iteration: int | None = None) -> dict[str, np.ndarray]:
    """Current values of everything the outer step optimizes for this batch."""
    it = state.iteration if iteration is None else iteration
    v = {f"theta/{k}": np.array(state.theta[k]) for k in policy.param_names()}
    if method.latent_kind == "sampled":
        v["mu"] = np.stack([state.vp_all[i].mu for i in batch_ids])
        v["log_sigma"] = np.stack([state.vp_all[i].log_sigma for i in batch_ids])
    if method.latent_kind == "bias":
        v["bias"] = np.array(state.bias)
    if method.learned_steps and state.steps is not None:
        v["alpha_mu"] = np.array(state.steps.alpha_mu)
        if method.latent_kind == "sampled":
            v["alpha_sigma"] = np.array(state.steps.alpha_sigma)
        if method.adapt_theta(it):
            if state.steps.alpha_theta is None:
                raise ValueError("theta inner update enabled but no theta step sizes initialized")
            for k in policy.param_names():
                v[f"alpha_theta/{k}"] = np.array(state.steps.alpha_theta[k])
    return v


def apply_values(state: MetaState, values: dict[str, np.ndarray], batch_ids: Sequence[str]) -> MetaState:
    new = state.copy()
    for k, v in values.items():
        if k.startswith("theta/"):
            name = k.split("/", 1)[1]
            new.theta[name] = np.clip(v, LOG_STD_MIN, LOG_STD_MAX) if name == "log_std" else np.array(v)
        elif k.startswith("alpha_theta/"):
            new.steps.alpha_theta[k.split("/", 1)[1]] = np.array(v)
        elif k == "alpha_mu":
            new.steps.alpha_mu = np.array(v)
        elif k == "alpha_sigma":
            new.steps.alpha_sigma = np.array(v)
        elif k == "bias":
            new.bias = np.array(v)
    if "mu" in values:
        for j, tid in enumerate(batch_ids):
            new.vp_all[tid] = VariationalParams(values["mu"][j], values["log_sigma"][j])
    return new


# ----------------------------------------------------------------------------
# data collection


def _is_stacked(policy: GaussianMLPPolicy, params: dict) -> bool:
    return np.ndim(params["log_std"]) == 2


def rollout_tasks(policy: GaussianMLPPolicy, params: dict, tasks: Sequence[envs.TaskSpec],
                  latents: np.ndarray | None, noise: np.ndarray, eps: np.ndarray | None,
                  workers: int = 1) -> list[TrajectoryBatch]:
    """``rollout`` split over contiguous task chunks; every task sees the same
    array shapes whatever the chunking, so results do not depend on ``workers``."""
    tasks = list(tasks)
    n = len(tasks)
    workers = max(1, min(int(workers), n))
    if workers == 1:
        return rollout(policy, params, tasks, latents, noise, eps)
    stacked = _is_stacked(policy, params)
    bounds = np.linspace(0, n, workers + 1).astype(int)

    def run(lo, hi):
        p = {k: v[lo:hi] for k, v in params.items()} if stacked else params
        return rollout(policy, p, tasks[lo:hi], None if latents is None else latents[lo:hi],
                       noise[lo:hi], None if eps is None else eps[lo:hi])

    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda b: run(*b), zip(bounds[:-1], bounds[1:])))
    return [b for part in parts for b in part]


def collect_stage(policy: GaussianMLPPolicy, method: MethodConfig, params: dict,
                  tasks: Sequence[envs.TaskSpec], task_index: Sequence[int], n_episodes: int,
                  seed: int, tag: str, iteration: int, sub: int = 0,
                  mu: np.ndarray | None = None, log_sigma: np.ndarray | None = None,
                  bias: np.ndarray | None = None, workers: int = 1) -> list[TrajectoryBatch]:
    """Episodes for every task in the batch; noise keyed by (tag, iteration, task, sub)."""
    horizon = tasks[0].horizon
    dz = policy.latent_dim
    eps_l, xi_l = [], []
    for i in task_index:
        e, x = draw_noise(stream(seed, tag, iteration, int(i), sub), n_episodes, horizon,
                          policy.action_dim, dz)
        eps_l.append(e)
        xi_l.append(x)
    xi = np.stack(xi_l)
    eps = z = None
    if method.latent_kind == "sampled":
        eps = np.stack(eps_l)
        z = mu[:, None, :] + np.exp(log_sigma)[:, None, :] * eps
    elif method.latent_kind == "bias":
        z = np.broadcast_to(bias[:, None, :], (len(tasks), n_episodes, dz)).copy()
    return rollout_tasks(policy, params, tasks, z, xi, eps, workers)


def advantages_for(method: MethodConfig, batches: Sequence[TrajectoryBatch]) -> Stacked:
    adv = [compute_advantages(b, method.gamma, method.baseline, method.normalize_advantages).advantages
           for b in batches]
    return stack(batches, adv)


# ----------------------------------------------------------------------------
# the two-level objective


@dataclass
class Forward:
    leaves: dict[str, Tensor]
    objective: MetaObjective
    adapted: AdaptedParams
    mean: Tensor  # post-update action means (N, R, da)
    log_std: Tensor  # matching log-std rows


class MetaProblem:
    """Fixed data for one meta-iteration; rebuilds the objective at any parameter values."""

    def __init__(self, policy: GaussianMLPPolicy, method: MethodConfig, n_tasks: int,
                 kl_weight: float, adapt_theta: bool, first_order: bool):
        self.policy = policy
        self.method = method
        self.n_tasks = n_tasks
        self.kl_weight = float(kl_weight)
        self.adapt_theta = adapt_theta
        self.first_order = first_order
        self.inner_data: list[Stacked] = []
        self.post: Stacked | None = None

    def _pre_nodes(self, leaves: dict[str, Tensor]):
        m = self.method
        theta = {k: leaves[f"theta/{k}"] for k in self.policy.param_names()}
        mu = ls = None
        if m.latent_kind == "sampled":
            mu, ls = leaves["mu"], leaves["log_sigma"]
        elif m.latent_kind == "bias":
            mu = ad.broadcast_to(leaves["bias"], (self.n_tasks, leaves["bias"].shape[-1]))
        if m.learned_steps:
            steps = {k: v for k, v in leaves.items() if k.startswith("alpha_")}
        else:
            steps = m.theta_step
        return theta, mu, ls, steps

    def adapt(self, leaves: dict[str, Tensor], n_steps: int | None = None,
              first_order: bool | None = None) -> AdaptedParams:
        theta, mu, ls, steps = self._pre_nodes(leaves)
        cur = AdaptedParams(theta, mu, ls)
        if not self.method.has_inner_update:
            return cur
        fo = self.first_order if first_order is None else first_order
        data = self.inner_data if n_steps is None else self.inner_data[:n_steps]
        for d in data:
            cur = inner_update(self.policy, cur.theta_post, d, cur.mu_post, cur.log_sigma_post, steps,
                               include_theta=self.adapt_theta, adapt_latent=self.method.adapt_latent,
                               latent_mode=self.method.latent_mode, first_order=fo)
        return cur

    def build(self, values: dict[str, np.ndarray], numeric: bool = False) -> Forward:
        """Objective graph at ``values``. ``numeric`` skips second-order recording
        (same values, used by the line search)."""
        m = self.method
        post = self.post
        leaves = {k: ad.tensor(v, name=k) for k, v in values.items()}
        adapted = self.adapt(leaves, first_order=True if numeric else None)
        mode = {"sampled": "reparam", "bias": "bias"}.get(m.latent_kind, "none")
        z_ep = latent_episodes(post, adapted.mu_post, adapted.log_sigma_post, mode)
        mean = self.policy.mean(adapted.theta_post, post.states, latent_rows(z_ep, post.horizon))
        log_std = self.policy.log_std_rows(adapted.theta_post, mean)
        logp = gaussian_log_prob(post.actions, mean, log_std)
        ratio = ad.exp(logp - post.logp_old)
        per_task = ad.sum(ratio * post.adv, axis=-1) * (1.0 / post.n_episodes)
        surr = ad.mean(per_task)
        if m.uses_kl:
            kl = ad.mean(kl_to_prior_t(leaves["mu"], leaves["log_sigma"]))
        else:
            kl = ad.constant(np.zeros(()))
        total = surr - ad.mul(self.kl_weight, kl)
        return Forward(leaves, MetaObjective(surr, kl, total), adapted, mean, log_std)


def fisher_vector_product(fwd: Forward, space: ParamSpace, v: np.ndarray) -> np.ndarray:
    """Hessian of the mean action KL (new vs current) times ``v``."""
    tan = space.unflatten(v)
    leaves = [fwd.leaves[k] for k in space.names]
    jm, jl = ad.jvp([fwd.mean, fwd.log_std], leaves, [tan[k] for k in space.names])
    rows = float(np.prod(fwd.mean.shape[:-1]))
    var = np.exp(2.0 * fwd.log_std.value)
    out = ad.vjp([fwd.mean, fwd.log_std], [jm / var / rows, 2.0 * jl / rows], leaves)
    return space.flatten({k: o.value for k, o in zip(space.names, out)})


def action_kl(fwd_old: Forward, fwd_new: Forward) -> float:
    with ad.no_grad():
        kl = gaussian_kl(ad.constant(fwd_old.mean.value), ad.constant(fwd_old.log_std.value),
                         ad.constant(fwd_new.mean.value), ad.constant(fwd_new.log_std.value))
    return float(np.mean(kl.value))


# ----------------------------------------------------------------------------
# trust-region step


@dataclass
class StepResult:
    x: np.ndarray
    accepted: bool
    mode: str  # trpo | gradient | zero_grad
    kl: float
    improvement: float
    backtracks: int
    full_step: np.ndarray
    cg_converged: bool = True


def conjugate_gradient(avp: Callable[[np.ndarray], np.ndarray], b: np.ndarray, iters: int = 10,
                       tol: float = 0.5) -> tuple[np.ndarray, bool]:
    """Solve ``A x = b``; converged when ``|r| <= tol * |b|`` within ``iters``."""
    x = np.zeros_like(b)
    r = b.copy()
    p = b.copy()
    rr = float(r @ r)
    target = (tol * math.sqrt(float(b @ b))) ** 2
    if rr <= target:
        return x, True
    for _ in range(iters):
        ap = avp(p)
        pap = float(p @ ap)
        if not math.isfinite(pap) or pap <= 0:
            return x, False
        a = rr / pap
        x = x + a * p
        r = r - a * ap
        rr_new = float(r @ r)
        if rr_new <= target:
            return x, True
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x, False


def trust_region_step(x0: np.ndarray, g: np.ndarray, fvp: Callable[[np.ndarray], np.ndarray],
                      evaluate: Callable[[np.ndarray], tuple[float, float]], f0: float,
                      delta: float = 0.01, cg_iters: int = 10, damping: float = 0.1,
                      cg_tol: float = 0.5, max_backtracks: int = 10, backtrack_ratio: float = 0.5,
                      fallback_lr: float = 0.01) -> StepResult:
    """Natural-gradient step scaled to the KL boundary, then backtracking.

    ``evaluate(x)`` returns ``(objective, kl_to_current)``. A step is accepted
    when the KL is within ``delta`` and the objective improved; otherwise the
    parameters stay at ``x0``. If CG fails to converge the direction falls
    back to ``fallback_lr * g`` (same acceptance test).
    """
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("meta-gradient has non-finite entries")
    if not np.any(g):
        return StepResult(x0.copy(), False, "zero_grad", 0.0, 0.0, 0, np.zeros_like(x0))

    def avp(v):
        return fvp(v) + damping * v

    s, converged = conjugate_gradient(avp, g, cg_iters, cg_tol)
    shs = float(s @ avp(s)) if converged else float("nan")
    if converged and math.isfinite(shs) and shs > 0:
        full, mode = math.sqrt(2.0 * delta / shs) * s, "trpo"
    else:
        LOG.warning("conjugate gradient did not converge in %d iterations; plain gradient step", cg_iters)
        full, mode = fallback_lr * g, "gradient"

    frac = 1.0
    for n_back in range(max_backtracks + 1):
        x = x0 + frac * full
        f, kl = evaluate(x)
        if math.isfinite(f) and math.isfinite(kl) and kl <= delta and f > f0:
            return StepResult(x, True, mode, kl, f - f0, n_back, full, converged)
        frac *= backtrack_ratio
    LOG.info("line search exhausted %d backtracks; step rejected", max_backtracks)
    return StepResult(x0.copy(), False, mode, 0.0, 0.0, max_backtracks, full, converged)


# ----------------------------------------------------------------------------
# one meta-iteration


def sample_task_batch(n_tasks: int, batch_size: int, seed: int, iteration: int) -> np.ndarray:
    if batch_size > n_tasks:
        raise ValueError(f"task_batch_size {batch_size} exceeds {n_tasks} training tasks")
    if batch_size == n_tasks:
        return np.arange(n_tasks)
    return np.sort(stream(seed, "task_batch", iteration).choice(n_tasks, batch_size, replace=False))


def prepare_problem(policy: GaussianMLPPolicy, method: MethodConfig, state: MetaState,
                    tasks: Sequence[envs.TaskSpec], idx: Sequence[int], outer: OuterConfig,
                    seed: int) -> tuple[MetaProblem, dict[str, np.ndarray], list, list]:
    """Collect all data for one iteration and return the problem plus current values."""
    it = state.iteration
    batch_tasks = [tasks[i] for i in idx]
    ids = [t.task_id for t in batch_tasks]
    adapt_theta = method.adapt_theta(it)
    values = meta_values(policy, method, state, ids, it)
    prob = MetaProblem(policy, method, len(idx), state.kl_weight, adapt_theta, method.first_order)

    mu = values.get("mu")
    ls = values.get("log_sigma")
    bias = None if state.bias is None else np.broadcast_to(state.bias, (len(idx), len(state.bias)))
    theta = dict(state.theta)
    pre_batches = []
    n_inner = method.inner_steps if method.has_inner_update else 1
    for k in range(n_inner):
        if k > 0:
            theta, mu, ls, bias = _numeric_adapted(prob, values, k)
        batches = collect_stage(policy, method, theta, batch_tasks, idx, outer.episodes_pre, seed,
                                "pre", it, k, mu, ls, bias, outer.workers)
        if k == 0:
            pre_batches = batches
        prob.inner_data.append(advantages_for(method, batches))

    if method.has_inner_update:
        theta, mu, ls, bias = _numeric_adapted(prob, values, n_inner)
        post_batches = collect_stage(policy, method, theta, batch_tasks, idx, outer.episodes_post, seed,
                                     "post", it, 0, mu, ls, bias, outer.workers)
        prob.post = advantages_for(method, post_batches)
    else:
        post_batches = pre_batches
        prob.post = prob.inner_data.pop()
    return prob, values, pre_batches, post_batches


def _numeric_adapted(prob: MetaProblem, values: dict, n_steps: int):
    leaves = {k: ad.tensor(v) for k, v in values.items()}
    a = prob.adapt(leaves, n_steps, first_order=True)
    theta = {k: v.value for k, v in a.theta_post.items()}
    mu = ls = bias = None
    if prob.method.latent_kind == "sampled":
        mu, ls = a.mu_post.value, a.log_sigma_post.value
    elif prob.method.latent_kind == "bias":
        bias = a.mu_post.value
    return theta, mu, ls, bias


def meta_iteration(policy: GaussianMLPPolicy, method: MethodConfig, state: MetaState,
                   tasks: Sequence[envs.TaskSpec], outer: OuterConfig, seed: int
                   ) -> tuple[MetaState, dict]:
    """One outer step. Returns the new state and a metrics row."""
    it = state.iteration
    idx = sample_task_batch(len(tasks), outer.task_batch_size, seed, it)
    ids = [tasks[i].task_id for i in idx]
    prob, values, pre_b, post_b = prepare_problem(policy, method, state, tasks, idx, outer, seed)

    space = ParamSpace.of(values)
    fwd = prob.build(values)
    leaves = [fwd.leaves[k] for k in space.names]
    grads = ad.grad(fwd.objective.total, leaves)
    named = {k: g for k, g in zip(space.names, grads)}
    named["objective"] = fwd.objective.total
    ad.check_finite(named, f"meta-iteration {it}")
    g = space.flatten({k: gr.value for k, gr in zip(space.names, grads)})
    x0 = space.flatten(values)
    f0 = float(fwd.objective.total.value)

    if outer.optimizer == "gradient":
        res = StepResult(x0 + outer.learning_rate * g, True, "gradient", float("nan"), float("nan"), 0,
                         outer.learning_rate * g)
    else:
        def evaluate(x):
            new = prob.build(space.unflatten(x), numeric=True)
            return float(new.objective.total.value), action_kl(fwd, new)

        res = trust_region_step(x0, g, lambda v: fisher_vector_product(fwd, space, v), evaluate, f0,
                                outer.delta, outer.cg_iters, outer.cg_damping, outer.cg_tol,
                                outer.max_backtracks, outer.backtrack_ratio, outer.fallback_lr)
    new_state = apply_values(state, space.unflatten(res.x), ids)
    new_state.iteration = it + 1
    kl_sum = float(sum(kl_to_prior(state.vp_all[i]) for i in ids)) if state.vp_all else 0.0
    row = {
        "iteration": it,
        "pre_return": float(np.mean([b.returns.mean() for b in pre_b])),
        "post_return": float(np.mean([b.returns.mean() for b in post_b])),
        "kl_sum": kl_sum,
        "accepted": int(res.accepted),
        "mode": tasks[idx[0]].reward_mode,
        "step": res.mode,
        "action_kl": res.kl,
    }
    return new_state, row


# ----------------------------------------------------------------------------
# checkpoints and the training driver


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, last_checkpoint: Path | None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass
class Checkpoint:
    policy: GaussianMLPPolicy
    method: MethodConfig
    state: MetaState
    tasks: list[envs.TaskSpec] = field(default_factory=list)


def write_metrics(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in METRIC_FIELDS])


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def save_checkpoint(directory, policy: GaussianMLPPolicy, method: MethodConfig, state: MetaState,
                    history: Sequence[dict], tasks: Sequence[envs.TaskSpec] = ()) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    arch = {"state_dim": policy.state_dim, "action_dim": policy.action_dim,
            "latent_dim": policy.latent_dim, "hidden_sizes": list(policy.hidden_sizes)}
    save_params(d / "policy.json", state.theta,
                {"architecture": arch, "method": method.to_dict(), "iteration": state.iteration,
                 "kl_weight": state.kl_weight})
    vp_doc = {"format": VP_FORMAT, "version": 1,
              "tasks": {k: v.to_dict() for k, v in state.vp_all.items()}}
    (d / "vp.json").write_text(json.dumps(vp_doc, indent=1))
    steps = {} if state.steps is None else state.steps.as_dict()
    if state.bias is not None:
        steps = dict(steps, bias=state.bias)
    save_params(d / "step_sizes.json", steps)
    if tasks:
        envs.save_manifest(d / "tasks.json", list(tasks), split="train")
    write_metrics(d / "metrics.csv", history)
    return d


def load_checkpoint(directory) -> Checkpoint:
    d = Path(directory)
    for name in ("policy.json", "vp.json", "step_sizes.json"):
        if not (d / name).exists():
            raise FileNotFoundError(f"checkpoint {d} is missing {name}")
    theta, meta = load_params(d / "policy.json")
    arch = meta["architecture"]
    mcfg = dict(meta["method"])
    mcfg["hidden_sizes"] = tuple(mcfg["hidden_sizes"])
    method = MethodConfig(**mcfg)
    policy = GaussianMLPPolicy(arch["state_dim"], arch["action_dim"], arch["latent_dim"],
                               tuple(arch["hidden_sizes"]))
    vp_doc = json.loads((d / "vp.json").read_text())
    vp_all = {k: VariationalParams.from_dict(v) for k, v in vp_doc["tasks"].items()}
    flat, _ = load_params(d / "step_sizes.json")
    bias = flat.pop("bias", None)
    steps = StepSizes.from_flat(flat) if flat else None
    state = MetaState(theta, vp_all, steps, bias, int(meta["iteration"]), float(meta["kl_weight"]))
    tasks = envs.load_manifest(d / "tasks.json") if (d / "tasks.json").exists() else []
    return Checkpoint(policy, method, state, tasks)


@dataclass
class TrainResult:
    state: MetaState
    history: list[dict]
    checkpoints: list[Path]


def meta_train(policy: GaussianMLPPolicy, method: MethodConfig, tasks: Sequence[envs.TaskSpec],
               outer: OuterConfig, n_iters: int, seed: int, out_dir=None, checkpoint_every: int = 1,
               state: MetaState | None = None, reward_mode: str | None = "dense",
               callback: Callable[[MetaState, dict], None] | None = None) -> TrainResult:
    """Run ``n_iters`` meta-iterations on the training tasks (dense rewards by default;
    ``reward_mode=None`` keeps each task's own mode).

    Writes ``ckpt_<iter>/`` every ``checkpoint_every`` iterations (always the
    initial and final ones) plus ``metrics.csv`` when ``out_dir`` is given.
    """
    if n_iters < 0:
        raise ValueError("n_iters must be >= 0")
    if reward_mode is not None:
        tasks = [t.with_mode(reward_mode) for t in tasks]
    state = init_state(policy, method, tasks, seed) if state is None else state
    out = None if out_dir is None else Path(out_dir)
    history: list[dict] = []
    ckpts: list[Path] = []
    last_saved = -1

    def save(st):
        nonlocal last_saved
        ckpts.append(save_checkpoint(out / f"ckpt_{st.iteration}", policy, method, st, history, tasks))
        last_saved = st.iteration

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save(state)
    for k in range(n_iters):
        try:
            state, row = meta_iteration(policy, method, state, tasks, outer, seed)
        except FloatingPointError as exc:
            last = None
            if out is not None:
                if last_saved != state.iteration:
                    save(state)
                last = ckpts[-1]
                write_metrics(out / "metrics.csv", history)
            raise TrainingAborted(f"non-finite values at iteration {state.iteration}: {exc}", last) from exc
        history.append(row)
        LOG.info("iter %d pre %.3f post %.3f kl %.4f %s", row["iteration"], row["pre_return"],
                 row["post_return"], row["kl_sum"], row["step"])
        if callback is not None:
            callback(state, row)
        if out is not None and ((k + 1) % checkpoint_every == 0 or k + 1 == n_iters):
            save(state)
    if out is not None:
        write_metrics(out / "metrics.csv", history)
    return TrainResult(state, history, ckpts)
