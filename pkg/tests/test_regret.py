import warnings

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from drc_agd import adversary, lti, policy, regret
from drc_agd.adversary import QuadraticLoss
from drc_agd.regret import EpisodeConfig


def _scalar(noise=0.5, a=0.3):
    return lti.scalar_system(a=a, w_bound=noise, e_bound=noise)


def test_zero_noise_zero_target_costs_nothing():
    model = _scalar(noise=0.0)
    losses = [QuadraticLoss(np.eye(2), np.zeros(2)) for _ in range(32)]
    ep = regret.run_episode(EpisodeConfig(model, 32, case=1, memory=(2, 2)), losses=losses)
    assert np.all(ep.cost == 0.0) and np.all(ep.u == 0.0)


def test_episode_deterministic():
    cfg = EpisodeConfig(_scalar(), 64, case=3, alpha=0.5, seed=11, memory=(3, 2))
    a, b = regret.run_episode(cfg), regret.run_episode(cfg)
    np.testing.assert_array_equal(a.u, b.u)
    np.testing.assert_array_equal(a.params, b.params)
    np.testing.assert_array_equal(a.cost, b.cost)


def test_controls_ignore_future_losses():
    cfg = EpisodeConfig(_scalar(), 50, case=2, seed=4, memory=(3, 3))
    base = regret.run_episode(cfg)
    t = 30
    swapped = base.losses[:t] + adversary.convex_only_sequence(50, seed=77, dim=2)[t:]
    other = regret.run_episode(cfg, losses=swapped)
    np.testing.assert_array_equal(base.u[: t + 1], other.u[: t + 1])
    assert not np.array_equal(base.u, other.u)


def test_episode_records_consistent():
    cfg = EpisodeConfig(_scalar(), 40, case=1, seed=2, memory=(2, 1))
    ep = regret.run_episode(cfg)
    # y = C x with x driven by the logged noise and the played inputs
    x = ep.w_log[0].copy()
    for k in range(ep.T):
        y = ep.model.C @ x + ep.e_log[k]
        np.testing.assert_allclose(ep.y[k], y, atol=1e-12)
        x = ep.model.A @ x + ep.model.B @ ep.u[k] + ep.w_log[k + 1]
    assert np.all(ep.slack >= -1e-12)
    assert regret.drift_excess(ep).max() <= 1e-9


def _closed_loop_cost(M, model, ep):
    """Direct simulation of u_t = M * y^nat_t for a scalar plant."""
    a, b, c = model.A[0, 0], model.B[0, 0], model.C[0, 0]
    x, xi = ep.w_log[0, 0], 0.0
    total = 0.0
    for k in range(ep.T):
        y = c * x + ep.e_log[k, 0]
        u = M * (y - c * xi)
        total += ep.losses[k](np.array([y]), np.array([u]))
        x = a * x + b * u + ep.w_log[k + 1, 0]
        xi = a * xi + b * u
    return total


def test_comparator_matches_grid_oracle():
    model = _scalar()
    ep = regret.run_episode(EpisodeConfig(model, 60, case=2, seed=5, memory=(1, 2), radius=0.8))
    cset = policy.DrcConstraintSet(1, 1, 1, 0.8)
    best = regret.best_fixed_drc(regret.replay_problem(ep), cset)
    grid = np.linspace(-0.8, 0.8, 1601)
    costs = np.array([_closed_loop_cost(M, model, ep) for M in grid])
    i = int(np.argmin(costs))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    fine = minimize_scalar(lambda M: _closed_loop_cost(M, model, ep), bounds=(lo, hi), method="bounded",
                           options={"xatol": 1e-10})
    assert best.converged
    assert best.cost == pytest.approx(_closed_loop_cost(best.P[0], model, ep), rel=1e-10)
    assert abs(best.P[0] - fine.x) <= 1e-4
    assert best.cost <= costs.min() + 1e-9


def test_comparator_beats_random_feasible_points():
    model = lti.random_stable_system(2, 1, 2, 0.6, seed=3)
    ep = regret.run_episode(EpisodeConfig(model, 80, case=2, seed=6, memory=(3, 2)))
    cset = policy.DrcConstraintSet(3, 1, 2, 1.0)
    prob = regret.replay_problem(ep)
    best = regret.best_fixed_drc(prob, cset)
    rng = np.random.default_rng(0)
    for _ in range(1000):
        assert best.cost <= prob.exact_value(policy.random_feasible(cset, rng)) + 1e-9


def test_replay_aggregated_form_matches_loss_by_loss():
    ep = regret.run_episode(EpisodeConfig(_scalar(), 30, case=3, alpha=0.25, seed=1, memory=(2, 2)))
    prob = regret.replay_problem(ep)
    for P in np.random.default_rng(1).standard_normal((5, 2)):
        assert prob.value(P) == pytest.approx(prob.exact_value(P), rel=1e-10)


def test_truncated_replay_with_full_memory_equals_full_replay():
    ep = regret.run_episode(EpisodeConfig(_scalar(), 25, case=1, seed=3, memory=(2, 25)))
    full = regret.replay_maps(ep)
    trunc = regret.replay_maps(ep, truncated=True)
    np.testing.assert_allclose(trunc[1], full[1], atol=1e-12)
    np.testing.assert_allclose(ep.cost, ep.F, atol=1e-12)


def test_decomposition_sums_and_burn_in():
    cfg = EpisodeConfig(_scalar(), 96, case=1, seed=8, memory=(3, 2), ldc_samples=4)
    s = regret.evaluate_episode(cfg, keep_episode=True)
    d = s.decomposition
    assert d.drc_regret == pytest.approx(s.regret, abs=1e-6)
    assert d.burn_in == pytest.approx(s.episode.cost[:5].sum())
    assert d.burn_in >= 0
    assert s.regret <= s.bound
    assert np.isfinite(d.policy_gap)


def test_zero_ldc_cost():
    model = _scalar()
    ep = regret.run_episode(EpisodeConfig(model, 40, case=1, seed=9, memory=(2, 1)))
    zero = regret.LinearDynamicController.static(np.zeros((1, 1)))
    x, total = ep.w_log[0, 0], 0.0
    for k in range(ep.T):
        y = x + ep.e_log[k, 0]
        total += ep.losses[k](np.array([y]), np.zeros(1))
        x = 0.3 * x + ep.w_log[k + 1, 0]
    assert regret.ldc_rollout(zero, model, ep.w_log, ep.e_log, ep.losses) == pytest.approx(total)


def test_static_ldc_closed_loop_oracle():
    model = _scalar(a=0.5)
    ep = regret.run_episode(EpisodeConfig(model, 40, case=1, seed=10, memory=(2, 1)))
    d = -0.4
    x, total = ep.w_log[0, 0], 0.0
    for k in range(ep.T):
        y = x + ep.e_log[k, 0]
        u = d * y
        total += ep.losses[k](np.array([y]), np.array([u]))
        x = 0.5 * x + u + ep.w_log[k + 1, 0]
    ctrl = regret.LinearDynamicController.static([[d]])
    assert ctrl.closed_loop_radius(model) == pytest.approx(0.1)
    assert regret.ldc_rollout(ctrl, model, ep.w_log, ep.e_log, ep.losses) == pytest.approx(total)
    batched = regret.ldc_rollouts([ctrl, ctrl], model, ep.w_log, ep.e_log, ep.losses)
    np.testing.assert_allclose(batched, total)


def test_sampled_ldcs_stabilise():
    model = lti.random_stable_system(3, 1, 2, 0.7, seed=0)
    ctrls = regret.sample_ldcs(model, 6, np.random.default_rng(0))
    assert np.all(ctrls[0].D == 0)
    assert all(c.closed_loop_radius(model) < 0.99 for c in ctrls)


def test_fit_rate_exact_power_law():
    T = 256 * 2 ** np.arange(6)
    fit = regret.fit_rate(T, 3.0 * T**0.37)
    assert fit.exponent == pytest.approx(0.37, abs=1e-12)
    assert np.exp(fit.intercept) == pytest.approx(3.0)
    assert regret.fit_rate(T, np.sqrt(T)).exponent == pytest.approx(0.5)


def test_fit_rate_logarithmic_data():
    T = 256 * 2 ** np.arange(6)
    fit = regret.fit_rate(T, 5 * np.log(T))
    assert 0.08 <= fit.exponent <= 0.20
    assert fit.log_ratio_growth() == pytest.approx(1.0)


def test_fit_rate_nonpositive_values_warn():
    T = 256 * 2 ** np.arange(6)
    R = np.sqrt(T)
    R[0] = -1.0
    with pytest.warns(UserWarning, match="nonpositive"):
        fit = regret.fit_rate(T, R)
    assert fit.horizons.size == 5
    with pytest.raises(ValueError):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            regret.fit_rate(T[:4], [1.0, -1.0, 2.0, 3.0])
