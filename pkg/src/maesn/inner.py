"""Inner-loop adaptation: the differentiable per-task update and meta-test adaptation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import ad, envs
from .ad import Tensor
from .estimators import Stacked, collect, compute_advantages, reinforce_surrogate, stack
from .methods import MethodConfig
from .policy import GaussianMLPPolicy, StepSizes, VariationalParams, LOG_STD_MAX, LOG_STD_MIN
from .rng import stream


@dataclass
class AdaptedParams:
    """Post-update parameters as graph nodes of the pre-update ones.

    ``theta_post`` is the very same dict as the input when theta is not
    adapted; otherwise its entries are stacked per task ``(N, ...)``.
    """

    theta_post: dict[str, Tensor]
    mu_post: Tensor | None
    log_sigma_post: Tensor | None
    grads: dict[str, Tensor] = field(default_factory=dict)


def _alpha(steps, key, default=None):
    if steps is None:
        return default
    if isinstance(steps, dict):
        return steps.get(key, default)
    return steps  # scalar step for every group


def inner_update(policy: GaussianMLPPolicy, theta: dict[str, Tensor], data: Stacked,
                 mu: Tensor | None = None, log_sigma: Tensor | None = None, steps=None,
                 include_theta: bool = False, adapt_latent: bool = True,
                 latent_mode: str = "reparam", first_order: bool = False) -> AdaptedParams:
    """One gradient-ascent step ``p' = p + alpha * grad`` on the REINFORCE surrogate.

    ``mu``/``log_sigma`` are per-task ``(N, dz)`` nodes (for ``latent_mode=
    "bias"`` ``mu`` is the deterministic latent and ``log_sigma`` is None).
    ``steps`` maps ``alpha_mu``, ``alpha_sigma`` and ``alpha_theta/<name>`` to
    nodes or floats, or is a single float used for every group. The result
    stays differentiable in theta, the latent parameters and the step sizes
    unless ``first_order`` is set, in which case the inner gradient is
    treated as a constant.
    """
    n = data.n_tasks
    theta_in = theta
    if include_theta:
        theta_in = {k: ad.broadcast_to(v, (n,) + v.shape) if v.ndim == len(policy.param_shapes()[k])
                    else v for k, v in theta.items()}
    s = reinforce_surrogate(policy, theta_in, data, mu, log_sigma, latent_mode)

    wrt: list[tuple[str, Tensor]] = []
    if adapt_latent and mu is not None:
        wrt.append(("mu", mu))
        if log_sigma is not None and latent_mode != "bias":
            wrt.append(("log_sigma", log_sigma))
    if include_theta:
        wrt += [(f"theta/{k}", v) for k, v in theta_in.items()]
    if not wrt:
        return AdaptedParams(theta, mu, log_sigma)

    gs = ad.grad(s, [w for _, w in wrt], create_graph=not first_order)
    grads = {name: g for (name, _), g in zip(wrt, gs)}
    ad.check_finite(grads, "inner update gradient")

    mu_post, ls_post = mu, log_sigma
    if "mu" in grads:
        mu_post = mu + _scaled(_alpha(steps, "alpha_mu"), grads["mu"])
    if "log_sigma" in grads:
        ls_post = log_sigma + _scaled(_alpha(steps, "alpha_sigma"), grads["log_sigma"])
    theta_post = theta
    if include_theta:
        theta_post = {}
        for k, v in theta_in.items():
            new = v + _scaled(_alpha(steps, f"alpha_theta/{k}"), grads[f"theta/{k}"])
            if k == "log_std":
                new = ad.clip(new, LOG_STD_MIN, LOG_STD_MAX)
            theta_post[k] = new
    return AdaptedParams(theta_post, mu_post, ls_post, grads)


def _scaled(alpha, g: Tensor) -> Tensor:
    if alpha is None:
        raise ValueError("missing step size for an adapted parameter group")
    return ad.mul(alpha, g)


# ----------------------------------------------------------------------------
# meta-test


@dataclass
class AdaptationResult:
    returns: list[float]  # mean return of the batch collected at each iteration
    vp_trace: list[VariationalParams]
    theta: dict | None = None  # final policy params when theta was adapted
    bias_trace: list[np.ndarray] | None = None
    modes: list[str] = field(default_factory=list)


def metatest_step_sizes(method: MethodConfig, steps: StepSizes | None, step_size=None):
    """Step sizes used at meta-test: learned by default, or one fixed scalar."""
    if step_size is not None:
        return float(step_size)
    if isinstance(method.metatest_step, (int, float)):
        return float(method.metatest_step)
    if method.learned_steps and steps is not None:
        return {k: ad.constant(v) for k, v in steps.as_dict().items()}
    if method.method == "maml":
        return float(method.theta_step)
    return float(method.alpha_init)


def metatest_adapt(policy: GaussianMLPPolicy, method: MethodConfig, theta: dict, task: envs.TaskSpec,
                   n_iters: int, episodes_per_iter: int, rng_seed: int,
                   steps: StepSizes | None = None, bias: np.ndarray | None = None,
                   step_size: float | None = None, require_sparse: bool = True) -> AdaptationResult:
    """Adapt to a new task from the prior by repeated policy-gradient steps.

    Latent methods start from ``N(0, I)`` and adapt ``(mu, log_sigma)`` with
    theta frozen. MAML adapts theta; the bias-transformation variants adapt
    the bias vector (and theta for ``maml_bias_all``). No KL term is used.
    Returns one mean return per collected batch: ``n_iters + 1`` entries, the
    first before any update.
    """
    if require_sparse and task.reward_mode != "sparse":
        raise ValueError(f"meta-test task {task.task_id} must use sparse rewards")
    if method.method == "scratch":
        raise ValueError("scratch has no meta-test adaptation; use train_scratch")
    alpha = metatest_step_sizes(method, steps, step_size)
    theta = {k: np.array(v) for k, v in theta.items()}
    dz = policy.latent_dim
    vp = VariationalParams.prior(dz) if method.latent_kind == "sampled" else None
    b = None if bias is None else np.array(bias, dtype=np.float64)
    adapt_theta = method.method in ("maml", "maml_bias_all")

    result = AdaptationResult([], [] if vp is None else [vp.copy()],
                              bias_trace=None if b is None else [b.copy()])
    for it in range(n_iters + 1):
        rng = stream(rng_seed, "metatest", it)
        batch = collect(policy, theta, vp, task, episodes_per_iter, rng, latent=b)
        result.returns.append(float(batch.returns.mean()))
        result.modes.append(task.reward_mode)
        if it == n_iters:
            break
        st = compute_advantages(batch, method.gamma, method.baseline, method.metatest_normalizes)
        data = stack([batch], [st.advantages])
        th = {k: ad.tensor(v) for k, v in theta.items()}
        mu = ls = None
        if vp is not None:
            mu, ls = ad.tensor(vp.mu[None]), ad.tensor(vp.log_sigma[None])
            mode = method.latent_grad
        elif b is not None:
            mu, mode = ad.tensor(b[None]), "bias"
        else:
            mode = "none"
        adapted = inner_update(policy, th, data, mu, ls, alpha, include_theta=adapt_theta,
                               adapt_latent=mu is not None, latent_mode=mode, first_order=True)
        if vp is not None:
            vp = VariationalParams(adapted.mu_post.value[0], adapted.log_sigma_post.value[0])
            result.vp_trace.append(vp.copy())
        elif b is not None:
            b = adapted.mu_post.value[0].copy()
            result.bias_trace.append(b.copy())
        if adapt_theta:
            theta = {k: v.value[0].copy() for k, v in adapted.theta_post.items()}
    if adapt_theta:
        result.theta = theta
    return result


def write_trace(path, result: AdaptationResult) -> None:
    """CSV: iteration, mean_return, mu..., log_sigma..."""
    dz = len(result.vp_trace[0].mu) if result.vp_trace else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "mean_return", "mode"] + [f"mu_{i}" for i in range(dz)]
                   + [f"log_sigma_{i}" for i in range(dz)])
        for i, ret in enumerate(result.returns):
            row = [i, repr(ret), result.modes[i] if result.modes else ""]
            if dz and i < len(result.vp_trace):
                vp = result.vp_trace[i]
                row += [repr(float(x)) for x in vp.mu] + [repr(float(x)) for x in vp.log_sigma]
            w.writerow(row)
