from statistics import NormalDist

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maesn import ad, envs
from maesn.estimators import (Trajectory, TrajectoryBatch, baseline_fit, collect, compute_advantages,
                              endpoint_dispersion, dump_trajectories, kl_to_prior, kl_to_prior_t,
                              likelihood_ratio_grad, load_trajectories, reinforce_surrogate, stack)
from maesn.policy import GaussianMLPPolicy, LatentSample, VariationalParams, as_tensors

C = np.array([1.5, -0.5])
BANDIT = envs.make_tasks("latent_bandit", [tuple(C)])[0]


def latent_passthrough_policy(log_std=0.0):
    """One linear layer: action mean equals z."""
    pol = GaussianMLPPolicy(1, 2, 2, ())
    p = pol.zero_params()
    p["w0"][1:, :] = np.eye(2)
    p["log_std"][:] = log_std
    return pol, p


def mean_policy(m):
    """No latent; action mean is the output bias ``m``."""
    pol = GaussianMLPPolicy(1, 2, 0, ())
    p = pol.zero_params()
    p["b0"] = np.array(m, dtype=np.float64)
    return pol, p


def surrogate_grads(pol, params, batch, adv, vp=None, mode="reparam"):
    data = stack([batch], [adv])
    t = as_tensors(params)
    mu = ls = None
    leaves = list(t.values())
    if vp is not None:
        mu, ls = ad.tensor(vp.mu[None]), ad.tensor(vp.log_sigma[None])
        leaves += [mu, ls]
    s = reinforce_surrogate(pol, t, data, mu, ls, mode if vp is not None else "none")
    gs = ad.grad(s, leaves)
    return dict(zip(list(t) + (["mu", "log_sigma"] if vp is not None else []), [g.value for g in gs]))


# ----------------------------------------------------------------------------
# collection


def test_collect_counts_and_distinct_latents():
    pol, p = latent_passthrough_policy()
    b = collect(pol, p, VariationalParams.prior(2), BANDIT, 20, 0)
    assert len(b) == 20 and b.z.shape == (20, 2)
    assert len({tuple(z) for z in b.z}) == 20


def test_collect_degenerate_sigma():
    pol, p = latent_passthrough_policy()
    vp = VariationalParams(np.array([0.3, -0.2]), np.log([1e-8, 1e-8]))
    b = collect(pol, p, vp, BANDIT, 20, 1)
    assert np.max(np.abs(b.z - vp.mu)) < 1e-6


def test_collect_deterministic():
    pol = GaussianMLPPolicy(2, 2, 2, (8,))
    p = pol.init_params(np.random.default_rng(0))
    task = envs.sample_tasks("point_nav", 1, seed=0)[0]
    a = collect(pol, p, VariationalParams.prior(2), task, 5, 7)
    b = collect(pol, p, VariationalParams.prior(2), task, 5, 7)
    assert a.returns.tobytes() == b.returns.tobytes()
    assert a.returns.shape == (5,)
    np.testing.assert_allclose(a.returns, a.rewards.sum(axis=1))


def test_collect_rejects_zero_episodes():
    pol, p = latent_passthrough_policy()
    with pytest.raises(ValueError):
        collect(pol, p, VariationalParams.prior(2), BANDIT, 0, 0)


# ----------------------------------------------------------------------------
# surrogate


def test_zero_advantages_give_zero_gradient():
    pol = GaussianMLPPolicy(2, 2, 2, (8,))
    p = pol.init_params(np.random.default_rng(0))
    task = envs.sample_tasks("point_nav", 1, seed=0)[0]
    vp = VariationalParams(np.array([0.2, 0.1]), np.array([-0.3, 0.2]))
    b = collect(pol, p, vp, task, 4, 3)
    for mode in ("reparam", "likelihood_ratio"):
        g = surrogate_grads(pol, p, b, np.zeros(b.rewards.shape), vp, mode)
        for k, v in g.items():
            assert np.all(v == 0.0), (mode, k)


def test_empty_batch_rejected():
    pol, p = latent_passthrough_policy()
    b = collect(pol, p, VariationalParams.prior(2), BANDIT, 2, 0)
    data = stack([b], [np.zeros((2, 1))])
    data.states = data.states[:, :0]
    with pytest.raises(ValueError):
        reinforce_surrogate(pol, as_tensors(p), data, ad.tensor(np.zeros((1, 2))), ad.tensor(np.zeros((1, 2))))


def test_bandit_action_mean_gradient_matches_analytic():
    m = np.array([0.2, 0.4])
    pol, p = mean_policy(m)
    b = collect(pol, p, None, BANDIT, 10_000, 11)
    r = b.returns
    g = surrogate_grads(pol, p, b, r[:, None])["b0"]
    per_ep = (b.actions[:, 0] - m) * r[:, None]  # unit action std
    se = per_ep.std(axis=0) / np.sqrt(len(r))
    analytic = -2.0 * (m - C)
    np.testing.assert_allclose(g, per_ep.mean(axis=0), atol=1e-10)
    assert np.all(np.abs(g - analytic) < 2 * se), (g, analytic, se)


def test_two_episode_hand_case():
    trajs = [Trajectory(np.zeros((1, 1)), np.zeros((1, 2)), np.array([1.0]), LatentSample(np.array([1.0, 0.0]), None), "t"),
             Trajectory(np.zeros((1, 1)), np.zeros((1, 2)), np.array([0.0]), LatentSample(np.array([-1.0, 0.0]), None), "t")]
    g_mu, _ = likelihood_ratio_grad(trajs, VariationalParams.prior(2), baseline=False)
    np.testing.assert_allclose(g_mu, [0.5, 0.0])


def test_constant_returns_give_zero_lr_gradient():
    pol, p = latent_passthrough_policy()
    b = collect(pol, p, VariationalParams.prior(2), BANDIT, 10, 0)
    b.rewards[:] = 3.0
    g_mu, g_ls = likelihood_ratio_grad(b, VariationalParams.prior(2))
    assert np.all(g_mu == 0) and np.all(g_ls == 0)


def test_sigma_underflow_rejected():
    pol, p = latent_passthrough_policy()
    vp = VariationalParams(np.zeros(2), np.full(2, np.log(1e-9)))
    b = collect(pol, p, vp, BANDIT, 3, 0)
    with pytest.raises(ValueError):
        likelihood_ratio_grad(b, vp)


def test_lr_and_reparam_agree_with_analytic_quadratic():
    # a = z + noise, R = -||a - c||^2 so dE[R]/dmu = -2 (mu - c), dE[R]/dlog_sigma = -2 sigma^2
    pol, p = latent_passthrough_policy()
    vp = VariationalParams(np.array([0.3, 0.2]), np.log([0.8, 0.6]))
    b = collect(pol, p, vp, BANDIT, 10_000, 5)
    adv = compute_advantages(b, normalize=False).advantages
    sigma = np.exp(vp.log_sigma)
    analytic_mu = -2.0 * (vp.mu - C)
    analytic_ls = -2.0 * sigma ** 2

    g_mu, g_ls = likelihood_ratio_grad(b, vp)
    u = (b.z - vp.mu) / sigma
    lr_mu = adv[:, :1] * u / sigma
    lr_ls = adv[:, :1] * (u * u - 1.0)

    g = surrogate_grads(pol, p, b, adv, vp, "reparam")
    rp_mu = adv[:, :1] * (b.actions[:, 0] - b.z)  # d log pi / dz with unit action std
    rp_ls = rp_mu * sigma * b.eps
    np.testing.assert_allclose(g["mu"][0], rp_mu.mean(0), atol=1e-10)
    np.testing.assert_allclose(g["log_sigma"][0], rp_ls.mean(0), atol=1e-10)

    n = len(b)
    for est, per_ep, ref in [(g_mu, lr_mu, analytic_mu), (g_ls, lr_ls, analytic_ls),
                             (g["mu"][0], rp_mu, analytic_mu), (g["log_sigma"][0], rp_ls, analytic_ls)]:
        se = per_ep.std(0) / np.sqrt(n)
        assert np.all(np.abs(est - ref) < 3 * se), (est, ref, se)
    se_comb = np.sqrt(lr_mu.var(0) + rp_mu.var(0)) / np.sqrt(n)
    assert np.all(np.abs(g_mu - g["mu"][0]) < 3 * se_comb)


def test_likelihood_ratio_surrogate_matches_lr_grad():
    pol, p = latent_passthrough_policy()
    pol_frozen = dict(p)
    vp = VariationalParams(np.array([0.1, -0.4]), np.array([0.2, -0.1]))
    b = collect(pol, pol_frozen, vp, BANDIT, 200, 9)
    adv = compute_advantages(b, normalize=False).advantages
    g = surrogate_grads(pol, pol_frozen, b, adv, vp, "likelihood_ratio")
    g_mu, g_ls = likelihood_ratio_grad(b, vp)
    np.testing.assert_allclose(g["mu"][0], g_mu, atol=1e-10)
    np.testing.assert_allclose(g["log_sigma"][0], g_ls, atol=1e-10)


# ----------------------------------------------------------------------------
# baselines and advantages


def test_identical_trajectories_have_zero_advantage():
    t = Trajectory(np.zeros((4, 2)), np.zeros((4, 2)), np.array([1.0, -2.0, 0.5, 3.0]), None, "t")
    st_ = compute_advantages([t, t, t], normalize=False)
    assert np.all(st_.advantages == 0.0)


def test_single_step_baseline_is_mean_return():
    pol, p = latent_passthrough_policy()
    b = collect(pol, p, VariationalParams.prior(2), BANDIT, 7, 2)
    np.testing.assert_allclose(baseline_fit(b)[:, 0], b.returns.mean())


def test_baseline_needs_two_trajectories():
    t = Trajectory(np.zeros((2, 2)), np.zeros((2, 2)), np.ones(2), None, "t")
    with pytest.raises(ValueError):
        baseline_fit([t])


def test_linear_baseline_shape():
    pol = GaussianMLPPolicy(2, 2, 2, (8,))
    p = pol.init_params(np.random.default_rng(0))
    task = envs.sample_tasks("point_nav", 1, seed=0)[0]
    b = collect(pol, p, VariationalParams.prior(2), task, 6, 0)
    assert baseline_fit(b, "linear").shape == b.rewards.shape


def test_normalized_advantages_have_zero_mean():
    pol = GaussianMLPPolicy(2, 2, 2, (8,))
    p = pol.init_params(np.random.default_rng(0))
    task = envs.sample_tasks("point_nav", 1, seed=0)[0]
    b = collect(pol, p, VariationalParams.prior(2), task, 6, 0)
    assert abs(compute_advantages(b).advantages.mean()) < 1e-10


def test_baseline_keeps_gradient_unbiased():
    m = np.array([0.2, 0.4])
    pol, p = mean_policy(m)
    with_b, without_b = [], []
    for i in range(200):
        b = collect(pol, p, None, BANDIT, 50, 1000 + i)
        score = b.actions[:, 0] - m
        without_b.append(np.mean(score * b.returns[:, None], axis=0))
        adv = compute_advantages(b, normalize=False).advantages[:, 0]
        with_b.append(np.mean(score * adv[:, None], axis=0))
    with_b, without_b = np.array(with_b), np.array(without_b)
    se = np.sqrt(with_b.var(0) + without_b.var(0)) / np.sqrt(200)
    assert np.all(np.abs(with_b.mean(0) - without_b.mean(0)) < 3 * se)


# ----------------------------------------------------------------------------
# KL


def test_kl_examples():
    assert kl_to_prior(VariationalParams.prior(2)) == 0.0
    assert kl_to_prior(VariationalParams(np.array([1.0, 0.0]), np.zeros(2))) == pytest.approx(0.5)


def stratified_normal(rng, n, d):
    # Latin hypercube draws: one jittered quantile per stratum in each dimension.
    nd = NormalDist()
    out = np.empty((n, d))
    for j in range(d):
        q = (rng.permutation(n) + rng.uniform(size=n)) / n
        out[:, j] = [nd.inv_cdf(x) for x in q]
    return out


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(4)
    for _ in range(5):
        mu = rng.normal(size=2)
        sigma = rng.uniform(0.3, 3.0, size=2)
        vp = VariationalParams(mu, np.log(sigma))
        z = mu + sigma * stratified_normal(rng, 100_000, 2)
        log_q = np.sum(-0.5 * ((z - mu) / sigma) ** 2 - np.log(sigma), axis=1)
        log_p = np.sum(-0.5 * z ** 2, axis=1)
        assert abs(np.mean(log_q - log_p) - kl_to_prior(vp)) < 1e-2


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=2), st.lists(st.floats(-2, 2), min_size=2, max_size=2))
def test_kl_positive_and_graph_version_agrees(mu, ls):
    vp = VariationalParams(np.array(mu), np.array(ls))
    kl = kl_to_prior(vp)
    assert kl >= -1e-15
    if np.any(np.abs(vp.mu) > 1e-3) or np.any(np.abs(vp.log_sigma) > 1e-3):
        assert kl > 0
    t = kl_to_prior_t(ad.constant(vp.mu[None]), ad.constant(vp.log_sigma[None]))
    assert t.value[0] == pytest.approx(kl, rel=1e-12, abs=1e-12)


# ----------------------------------------------------------------------------
# dumps


def test_trajectory_dump_roundtrip(tmp_path):
    pol, p = latent_passthrough_policy()
    b = collect(pol, p, VariationalParams.prior(2), BANDIT, 3, 0)
    dump_trajectories(tmp_path / "t.jsonl", [b])
    recs = load_trajectories(tmp_path / "t.jsonl")
    assert len(recs) == 3
    np.testing.assert_array_equal(recs[1]["z"], b.z[1])


def test_endpoint_dispersion():
    b = TrajectoryBatch(BANDIT, np.zeros((2, 1, 1)), np.zeros((2, 1, 2)), np.zeros((2, 1)), np.zeros((2, 1)),
                        np.array([[[0.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [3.0, 4.0]]]))
    assert endpoint_dispersion(b) == pytest.approx(5.0)
