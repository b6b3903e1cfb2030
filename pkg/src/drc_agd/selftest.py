"""Quick property checks printed as one pass/fail line per invariant."""

from __future__ import annotations

import numpy as np

from . import adversary, lti, oco, policy, regret
from .learner import ConfigurationError, LambdaSchedule
from .truncated import LossContext, finite_difference_gradient, memoryless_f, memoryless_gradient


def _natural_output_identity():
    worst = 0.0
    for seed in range(10):
        model = lti.random_stable_system(3, 2, 2, 0.8, seed=seed)
        rng = np.random.default_rng(seed)
        state = lti.initial_state(model, seed)
        for _ in range(40):
            y = lti.observe(state)
            ynat = lti.natural_output(y, state.input_history, model)
            past = np.array(state.input_history[::-1]).reshape(-1, model.du)
            drive = sum((model.markov(s + 1) @ past[s] for s in range(len(past))), np.zeros(model.dy))
            worst = max(worst, float(np.linalg.norm(y - ynat - drive)))
            lti.advance(state, rng.standard_normal(model.du))
    return worst <= 1e-9, f"max residual {worst:.2e}"


def _replay_exact():
    model = lti.random_stable_system(3, 1, 2, 0.9, seed=3)
    state = lti.initial_state(model, 4)
    for k in range(60):
        lti.step(state, [np.cos(k)])
    w, e = state.noise_log
    ok = np.array_equal(lti.replay_outputs(model, w, e, state.input_history), np.array(state.output_history))
    return ok, "replayed outputs identical" if ok else "replay mismatch"


def _psi_envelope():
    model = lti.random_stable_system(3, 2, 2, 0.85, seed=5)
    c, rho = model.psi_envelope
    excess = max(lti.psi(model, i) - c * rho**i for i in range(1, 51))
    return excess <= 1e-12 * c, f"max psi(i) - c rho^i = {excess:.2e}"


def _projection():
    rng = np.random.default_rng(6)
    cset = policy.DrcConstraintSet(3, 2, 2, 1.0)
    idem = nonexp = dist = 0.0
    for _ in range(500):
        p1, p2 = rng.standard_normal((2, cset.dim)) * 2
        a, b = cset.project(p1), cset.project(p2)
        idem = max(idem, float(np.linalg.norm(cset.project(a) - a)))
        nonexp = max(nonexp, float(np.linalg.norm(a - b) - np.linalg.norm(p1 - p2)))
        q = policy.random_feasible(cset, rng)
        dist = max(dist, float(np.linalg.norm(p1 - a) - np.linalg.norm(p1 - q)))
    ok = idem <= 1e-9 and nonexp <= 1e-9 and dist <= 1e-9
    return ok, f"idempotence {idem:.1e}, expansion {nonexp:.1e}, distance excess {dist:.1e}"


def _random_ctx(rng):
    m, h, du, dy = 3, 2, 2, 2
    A = rng.standard_normal((4, 4))
    loss = adversary.QuadraticLoss(A @ A.T, rng.standard_normal(4))
    return LossContext(10, rng.standard_normal((m + h, dy)), rng.standard_normal((h, dy, du)), loss, m, h, du)


def _gradient():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        ctx = _random_ctx(rng)
        P = rng.standard_normal(ctx.n_params)
        fd = finite_difference_gradient(lambda q: memoryless_f(q, ctx), P)
        worst = max(worst, float(np.linalg.norm(memoryless_gradient(P, ctx) - fd) / max(1.0, np.linalg.norm(fd))))
    return worst <= 1e-5, f"max relative error {worst:.2e}"


def _convexity():
    rng = np.random.default_rng(8)
    worst = -np.inf
    for _ in range(20):
        ctx = _random_ctx(rng)
        for _ in range(50):
            P1, P2 = rng.standard_normal((2, ctx.n_params))
            s = rng.random()
            gap = memoryless_f(s * P1 + (1 - s) * P2, ctx) - s * memoryless_f(P1, ctx) - (1 - s) * memoryless_f(P2, ctx)
            worst = max(worst, gap)
    return worst <= 1e-9, f"max convexity gap {worst:.2e}"


def _lambda_monotone():
    try:
        LambdaSchedule("custom", [1.0, 2.0])
    except ConfigurationError:
        return True, "increasing schedule rejected"
    return False, "increasing schedule accepted"


def _losses():
    rng = np.random.default_rng(9)
    bad = 0
    floor_gap = 0.0
    for loss in adversary.decaying_curvature_sequence(0.25, 1.0, 20, seed=1, dim=3):
        bad += adversary.convexity_violations(loss, 3.0, rng, 200) + adversary.lipschitz_violations(loss, 3.0, rng, 200)
        floor_gap = max(floor_gap, loss.curvature - float(np.linalg.eigvalsh(loss.hessian())[0]))
    for loss in adversary.convex_only_sequence(20, seed=2, dim=3):
        bad += adversary.convexity_violations(loss, 3.0, rng, 200) + adversary.lipschitz_violations(loss, 3.0, rng, 200)
    return bad == 0 and floor_gap <= 1e-9, f"{bad} violations, curvature floor excess {floor_gap:.1e}"


def _oco_bounds(h):
    rng = np.random.default_rng(10 + h)
    worst = -np.inf
    for _ in range(20):
        res = oco.run_instance(oco.random_instance(rng, T=100, h=h))
        worst = max(worst, res.regret - res.bound)
    return worst <= 1e-6, f"max regret - bound {worst:.3g}"


def _episode():
    model = lti.scalar_system(a=0.3, w_bound=0.5, e_bound=0.5)
    cfg = regret.EpisodeConfig(model, 128, case=1, seed=1, memory=(3, 3), ldc_samples=2)
    s = regret.evaluate_episode(cfg, keep_episode=True)
    gap = abs(s.decomposition.drc_regret - s.regret)
    ok = s.max_drift_excess <= 1e-9 and gap <= 1e-6 and s.min_slack >= -1e-9 and s.regret <= s.bound + 1e-6
    return ok, (f"drift excess {s.max_drift_excess:.2e}, decomposition gap {gap:.1e}, "
                f"regret {s.regret:.3g} <= bound {s.bound:.3g}")


def _causality():
    model = lti.scalar_system(a=0.3, w_bound=0.5, e_bound=0.5)
    cfg = regret.EpisodeConfig(model, 64, case=2, seed=3, memory=(3, 3), ldc_samples=0)
    base = regret.run_episode(cfg)
    t = 40
    swapped = base.losses[:t] + adversary.convex_only_sequence(64, seed=99, dim=2)[t:]
    other = regret.run_episode(cfg, losses=swapped)
    ok = np.array_equal(base.u[: t + 1], other.u[: t + 1])
    return ok, f"u_1..u_{t + 1} unchanged after replacing losses from step {t + 1}"


CHECKS = [
    ("natural-output identity", _natural_output_identity),
    ("bit-exact replay", _replay_exact),
    ("psi geometric envelope", _psi_envelope),
    ("projection idempotent / non-expansive / nearest", _projection),
    ("analytic gradient vs finite differences", _gradient),
    ("memory-less loss convexity", _convexity),
    ("lambda schedule monotonicity", _lambda_monotone),
    ("loss convexity, Lipschitz and curvature certificates", _losses),
    ("OCO regret bound (no memory)", lambda: _oco_bounds(0)),
    ("OCO regret bound (memory h=2)", lambda: _oco_bounds(2)),
    ("episode drift / decomposition / feasibility / bound", _episode),
    ("online causality", _causality),
]


def run_selftest(out=print):
    """Run every check; returns True when all pass."""
    all_ok = True
    for name, check in CHECKS:
        try:
            ok, detail = check()
        except Exception as exc:  # report, keep going
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        all_ok &= bool(ok)
        out(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return all_ok
