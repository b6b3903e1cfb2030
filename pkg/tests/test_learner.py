import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from drc_agd import learner, lti, policy
from drc_agd.adversary import QuadraticLoss
from drc_agd.learner import (
    BoundConstants,
    ConfigurationError,
    LambdaSchedule,
    OcomConstants,
    StepState,
    make_lambda_schedule,
    regret_bound_control,
    regret_bound_oco,
    regret_bound_ocom,
    step_rate,
)
from drc_agd.truncated import LossContext, memoryless_gradient


def test_step_rate_examples():
    T = 1024
    assert step_rate(StepState().advance(0.0, math.sqrt(T))) == pytest.approx(1 / 32)
    s = StepState()
    for t in range(1, 11):
        s = s.advance(0.3, 0.0)
        assert step_rate(s) == pytest.approx(1 / (0.3 * t))


def test_step_rate_zero_denominator():
    with pytest.raises(ConfigurationError, match="lambda_1"):
        step_rate(StepState().advance(0.0, 0.0))


def test_step_rate_prefix_sum_oracle():
    rng = np.random.default_rng(0)
    H = rng.exponential(size=200) * (rng.random(200) < 0.5)
    lam = np.sort(rng.exponential(size=200))[::-1]
    s = StepState()
    for t in range(200):
        s = s.advance(H[t], lam[t])
        assert abs(step_rate(s) - 1.0 / (H[: t + 1].sum() + lam[: t + 1].sum())) <= 1e-15 * step_rate(s) * 10


def test_state_rejects_negative():
    with pytest.raises(ConfigurationError):
        StepState().advance(-1.0, 0.0)


def test_oco_update_stationary_and_scalar_recursion():
    proj = learner.ball_projection(5.0)
    u, s, _ = learner.oco_update(np.array([0.5]), np.zeros(1), 0.0, 1.0, StepState(), proj)
    assert u[0] == 0.5
    # f_t(u) = (u - 1)^2, H_t = 2, lambda = 0, u_1 = 0
    u, s = np.zeros(1), StepState()
    hand = 0.0
    for t in range(1, 30):
        u, s, eta = learner.oco_update(u, 2 * (u - 1), 0.0, 2.0, s, proj)
        hand = hand - (1.0 / (2.0 * t)) * 2 * (hand - 1)
        assert u[0] == pytest.approx(hand)
        if t == 1:
            assert u[0] == pytest.approx(1.0)


def test_oco_update_stays_feasible():
    rng = np.random.default_rng(1)
    proj = learner.ball_projection(1.0)
    u, s = np.zeros(3), StepState()
    for _ in range(100):
        u, s, _ = learner.oco_update(u, rng.standard_normal(3) * 10, 0.1, 0.0, s, proj)
        assert np.linalg.norm(u) <= 1.0 + 1e-12


def _scalar_ctx(P_dim=2):
    model = lti.scalar_system(a=0.5)
    m, h = P_dim, 1
    loss = QuadraticLoss(np.diag([1.0, 0.5]), np.array([0.2, -0.1]))
    win = np.array([0.4, -0.3, 0.8])
    return LossContext(3, win.reshape(-1, 1), model.markov_stack(h), loss, m, h, 1)


def test_drc_agd_update_zero_gradient():
    ctx = _scalar_ctx()
    cset = policy.DrcConstraintSet(2, 1, 1, 1.0)
    P = np.array([0.2, -0.1])
    nxt, _, _, _ = learner.drc_agd_update(P, ctx, 0.0, 1.0, StepState(), cset, grad=np.zeros(2))
    np.testing.assert_array_equal(nxt, P)


def test_drc_agd_update_composition():
    ctx = _scalar_ctx()
    cset = policy.DrcConstraintSet(2, 1, 1, 0.3)
    P = np.array([0.1, 0.05])
    state = StepState(1.0, 2.0, 1)
    nxt, new_state, eta, _ = learner.drc_agd_update(P, ctx, 0.5, 0.25, state, cset)
    hand_eta = 1.0 / (1.0 + 0.25 + 2.0 + 0.5)
    hand = policy.project(P - hand_eta * (memoryless_gradient(P, ctx) + 0.5 * P), cset)
    assert eta == pytest.approx(hand_eta)
    np.testing.assert_allclose(nxt, hand, atol=1e-15)
    assert new_state == StepState(1.25, 2.5, 2)


def test_strong_convexity_transfer():
    assert learner.strong_convexity_transfer(1.0, 0.5, 0.5, np.eye(2), np.zeros((2, 2))) == pytest.approx(1.0)
    assert learner.strong_convexity_transfer(0.0, 0.5, 0.5, np.eye(2), np.zeros((2, 2))) == 0.0
    rng = np.random.default_rng(2)
    for _ in range(10):
        C, A = rng.standard_normal((2, 3)), rng.standard_normal((3, 3))
        smin = np.linalg.svd(C)[1][-1]
        anorm = np.sqrt(np.max(np.linalg.eigvalsh(A.T @ A)))
        expect = 0.7 * (0.2 + 0.3 * (smin / (1 + anorm**2)) ** 2)
        assert learner.strong_convexity_transfer(0.7, 0.3, 0.2, C, A) == pytest.approx(expect, abs=1e-12)
    with pytest.raises(ValueError):
        learner.strong_convexity_transfer(-1.0, 0.1, 0.1, np.eye(1), np.zeros((1, 1)))


def test_lambda_schedules():
    lam = make_lambda_schedule(1, 1024)
    assert lam[1] == 32.0 and lam[2] == 0.0 and len(lam) == 1024
    assert make_lambda_schedule(3, 256, H_tilde=1.0, alpha=0.5)[1] == pytest.approx(16.0)
    assert np.all(make_lambda_schedule(2, 100, H_tilde=0.3).values == 0)
    assert make_lambda_schedule(4, 100, H_tilde=2.0, alpha=0.8)[1] == pytest.approx(20.0)


def test_lambda_schedule_errors():
    with pytest.raises(ConfigurationError, match="H_tilde"):
        make_lambda_schedule(2, 100, H_tilde=0.0)
    with pytest.raises(ConfigurationError, match="T >= 4"):
        make_lambda_schedule(1, 3)
    with pytest.raises(ConfigurationError):
        make_lambda_schedule(3, 100, H_tilde=1.0, alpha=0.7)
    with pytest.raises(ConfigurationError):
        make_lambda_schedule(4, 100, H_tilde=1.0, alpha=0.3)
    with pytest.raises(ConfigurationError, match="non-increasing"):
        LambdaSchedule("custom", [1.0, 0.5, 0.7])
    with pytest.raises(ConfigurationError):
        LambdaSchedule("custom", [-1.0])


@given(st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=30))
def test_sorted_custom_schedules_accepted(values):
    sched = LambdaSchedule("custom", sorted(values, reverse=True))
    assert all(sched[i] >= sched[i + 1] for i in range(1, len(values)))


def test_regret_bound_oco_examples():
    assert regret_bound_oco(1.0, [1.0], [0.0], [1.0]) == pytest.approx(2.5)
    T, H, G = 50, 0.4, 1.3
    harmonic = 0.5 * G**2 / H * np.sum(1.0 / np.arange(1, T + 1))
    assert regret_bound_oco(2.0, G, np.full(T, H), np.zeros(T)) == pytest.approx(harmonic)


def test_regret_bound_oco_term_by_term():
    rng = np.random.default_rng(3)
    T = 40
    G = rng.random(T) * 3
    H = rng.random(T)
    lam = np.sort(rng.random(T))[::-1]
    D = 1.7
    total = 0.5 * D**2 * lam.sum()
    sH = sL = 0.0
    for t in range(T):
        sH += H[t]
        sL += lam[t]
        total += 0.5 * (G[t] + lam[t] * D) ** 2 / (sH + sL)
    assert regret_bound_oco(D, G, H, lam) == pytest.approx(total, rel=1e-12)


def test_regret_bound_ocom():
    rng = np.random.default_rng(4)
    T = 30
    H = rng.random(T)
    lam = np.sort(rng.random(T))[::-1]
    c0 = OcomConstants(D=1.2, G_f=2.0, G_c=3.0, h=0)
    np.testing.assert_allclose(c0.g_tilde(lam), 2.0 + lam * 1.2)
    assert regret_bound_ocom(c0, H, lam) == pytest.approx(regret_bound_oco(1.2, 2.0, H, lam))
    c = OcomConstants(D=1.2, G_f=2.0, G_c=3.0, h=2)
    gt = c.g_tilde(lam)
    assert np.all(np.diff(gt) <= 1e-12)
    direct = sum(0.5 * gt[t] ** 2 / (H[: t + 1].sum() + lam[: t + 1].sum()) for t in range(T)) + 0.5 * 1.44 * lam.sum()
    assert regret_bound_ocom(c, H, lam) == pytest.approx(direct, rel=1e-12)
    flat = OcomConstants(D=1.0, G_f=1.0, G_c=1.0, h=1)
    g2 = (1.0 + 2.0) * 1.0
    expect = 0.5 * g2 / 0.5 * np.sum(1.0 / np.arange(1, T + 1))
    assert regret_bound_ocom(flat, np.full(T, 0.5), np.zeros(T)) == pytest.approx(expect)


def test_bound_constants():
    c = BoundConstants(L=1.0, R_M=1.0, R_G=1.0, R_nat=1.0, m=1, h=1, du=1, dy=1)
    assert c.burn_in_constant == pytest.approx(14.0)
    assert c.G_f == c.G_c == pytest.approx(1.0)
    assert c.G_hat_sq == pytest.approx(2.0 + 1.0)
    c2 = BoundConstants(L=2.0, R_M=1.5, R_G=3.0, R_nat=2.0, m=4, h=3, du=2, dy=3)
    assert c2.G_f == pytest.approx(2.0 * 2.0 * 1.5 * 3.0 * 4.0)
    assert c2.D == pytest.approx(2 * math.sqrt(2) * 1.5)


def test_regret_bound_control():
    c = BoundConstants(L=1.0, R_M=1.0, R_G=2.0, R_nat=1.5, m=3, h=2, du=1, dy=1)
    prev = -np.inf
    for T in (4, 16, 64, 256):
        lam = make_lambda_schedule(1, T).values
        H = np.zeros(T)
        b = regret_bound_control(c, H, lam)
        assert b == pytest.approx(c.burn_in_constant + regret_bound_ocom(c, H, lam))
        assert b >= prev
        prev = b


def test_learner_wrapper_tracks_state():
    cset = policy.DrcConstraintSet(2, 1, 1, 1.0)
    sched = make_lambda_schedule(1, 16)
    lrn = learner.DrcAgdLearner(cset, sched, curvature_factor=0.5)
    ctx = _scalar_ctx()
    info = lrn.update(ctx, H_l=2.0)
    assert info["lambda"] == 4.0 and info["H"] == 1.0
    assert info["eta"] == pytest.approx(1.0 / 5.0)
    assert lrn.state.t == 1
    with pytest.raises(ConfigurationError):
        learner.DrcAgdLearner(cset, sched, 1.0, P=np.array([2.0, 0.0]))
