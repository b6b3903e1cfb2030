"""Online-control episodes, best-in-hindsight comparators and regret accounting."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import adversary, lti, policy
from .learner import (
    BoundConstants,
    ConfigurationError,
    DrcAgdLearner,
    make_lambda_schedule,
    regret_bound_control,
    transfer_factor,
)
from .truncated import LossContext, expected_gradient, memoryless_point, memoryless_value_and_gradient

log = logging.getLogger(__name__)

DEFAULT_FAMILY = {1: "rank-deficient-quadratic", 2: "quadratic", 3: "quadratic", 4: "quadratic"}
GRADIENT_MODES = ("realized", "monte-carlo")


@dataclass
class EpisodeConfig:
    system: lti.SystemModel
    T: int
    case: int | str = 1
    seed: int = 0
    loss_family: str | None = None
    H: float = 1.0  # curvature scale of the quadratic families
    alpha: float = 0.0
    target_radius: float = 0.5
    radius: float = 1.0
    memory: tuple[int, int] | None = None
    lambdas: list | None = None
    gradient_mode: str = "realized"
    mc_samples: int = 8
    ldc_samples: int = 8

    def __post_init__(self):
        if self.T < 1:
            raise ConfigurationError("horizon T must be positive")
        if self.case in (1, 2, 3, 4) and self.T < 4:
            raise ConfigurationError(f"T={self.T}: curvature-regime presets require T >= 4")
        if self.gradient_mode not in GRADIENT_MODES:
            raise ConfigurationError(f"gradient_mode must be one of {GRADIENT_MODES}")
        if self.radius <= 0:
            raise ConfigurationError("radius R_M must be positive")

    @property
    def family(self):
        if self.loss_family is not None:
            return self.loss_family
        return DEFAULT_FAMILY.get(self.case, "quadratic")

    @property
    def loss_alpha(self):
        # case 2 is the constant-curvature member of the decaying family
        return 0.0 if self.case == 2 else self.alpha


def _seed_streams(seed):
    noise, loss, mc, comp = np.random.SeedSequence(seed).spawn(4)
    return noise, int(loss.generate_state(1)[0]), mc, comp


@dataclass
class Episode:
    config: EpisodeConfig
    m: int
    h: int
    losses: list
    ynat: np.ndarray  # (T, d_y)
    y: np.ndarray
    u: np.ndarray
    cost: np.ndarray  # l_t(y_t, u_t)
    F: np.ndarray  # F_t(P_{t-h:t})
    f: np.ndarray  # f_t(P_t)
    eta: np.ndarray  # eta_{t+1} used by the update after step t
    H: np.ndarray  # decision-space curvature H_t
    lam: np.ndarray
    grad_norm: np.ndarray
    step_norm: np.ndarray  # ||P_{t+1} - P_t||
    slack: np.ndarray
    params: np.ndarray  # (T + 1, n): P_1 ... P_{T+1}
    w_log: np.ndarray
    e_log: np.ndarray
    constants: BoundConstants = None

    @property
    def model(self):
        return self.config.system

    @property
    def T(self):
        return self.cost.size

    @property
    def windows(self):
        """(T, m+h, d_y) newest-first y^nat windows, zero-padded before t = 1."""
        pad = self.m + self.h
        buf = np.vstack([np.zeros((pad, self.model.dy)), self.ynat])
        idx = np.arange(self.T)[:, None] + pad - np.arange(pad)[None, :]
        return buf[idx]

    def trace_rows(self):
        """Per-step dictionaries in trace-column order."""
        rows = []
        for k in range(self.T):
            row = {"t": k + 1}
            row.update({f"y_{i}": v for i, v in enumerate(self.y[k])})
            row.update({f"u_{i}": v for i, v in enumerate(self.u[k])})
            row.update({f"ynat_{i}": v for i, v in enumerate(self.ynat[k])})
            row.update(
                l_t=self.cost[k],
                F_t=self.F[k],
                f_t=self.f[k],
                eta_t=self.eta[k],
                H_t=self.H[k],
                lambda_t=self.lam[k],
                grad_norm=self.grad_norm[k],
                feasibility_slack=self.slack[k],
            )
            rows.append(row)
        return rows


def _mc_windows(model, m, h, t, count, rng):
    w = lti.sample_natural_windows(model, m + h, count, rng)
    if t < m + h:
        w[:, t:] = 0.0
    return w


def run_episode(config: EpisodeConfig, losses=None) -> Episode:
    """Run the online protocol for T steps.

    At each step: observe y_t, recover y^nat_t, play u_t from the current
    parameters, receive l_t, pay l_t(y_t, u_t), then update the parameters.
    ``losses`` overrides the generated sequence (it is only read after u_t is
    chosen).
    """
    model = config.system
    T = config.T
    noise_seq, loss_seed, mc_seq, _ = _seed_streams(config.seed)
    if config.memory is None:
        m, h = lti.select_memory(model, config.radius, T)
    else:
        m, h = (int(v) for v in config.memory)
        if m < 1 or h < 0:
            raise ConfigurationError("memory lengths need m >= 1 and h >= 0")
    dy, du = model.dy, model.du
    if losses is None:
        losses = adversary.make_sequence(
            config.family, T, loss_seed, dy + du, alpha=config.loss_alpha, H=config.H, target_radius=config.target_radius
        )
    if len(losses) < T:
        raise ConfigurationError(f"loss sequence has {len(losses)} entries, horizon is {T}")

    factor = transfer_factor(model)
    H_tilde = config.H * factor
    schedule = make_lambda_schedule(config.case, T, H_tilde=H_tilde, alpha=config.alpha, values=config.lambdas)
    cset = policy.DrcConstraintSet(m, du, dy, config.radius)
    learner = DrcAgdLearner(cset, schedule, factor)
    G = model.markov_stack(h)

    state = lti.initial_state(model, np.random.default_rng(noise_seq))
    mc_rng = np.random.default_rng(mc_seq)
    pad = m + h
    ybuf = np.zeros((pad + T, dy))
    ubuf = np.zeros((h + T, du))
    xi = np.zeros(model.dx)  # state driven by the inputs alone
    n = cset.dim
    out = {k: np.empty(T) for k in ("cost", "F", "f", "eta", "H", "lam", "grad_norm", "step_norm", "slack")}
    ys, us = np.empty((T, dy)), np.empty((T, du))
    params = np.empty((T + 1, n))
    params[0] = learner.P

    for k in range(T):
        t = k + 1
        y = lti.observe(state)
        ynat = y - model.C @ xi
        ybuf[pad + k] = ynat
        window = ybuf[k + 1 : pad + k + 1][::-1]
        M = learner.P.reshape(m, du, dy)
        u = np.einsum("sij,sj->i", M, window[:m])
        loss = losses[k]
        ys[k], us[k] = y, u
        out["cost"][k] = loss(y, u)
        ytil = ynat + np.einsum("sij,sj->i", G, ubuf[k : h + k][::-1]) if h else ynat
        out["F"][k] = loss(ytil, u)
        ubuf[h + k] = u
        lti.advance(state, u)
        xi = model.A @ xi + model.B @ u

        ctx = LossContext(t, window, G, loss, m, h, du)
        if config.gradient_mode == "monte-carlo":
            out["f"][k] = loss.value(memoryless_point(learner.P, ctx))
            grad = expected_gradient(learner.P, ctx, _mc_windows(model, m, h, t, config.mc_samples, mc_rng))
        else:
            out["f"][k], grad = memoryless_value_and_gradient(learner.P, ctx)
        info = learner.update(ctx, adversary.curvature(loss), grad=grad)
        for key in ("eta", "H", "grad_norm", "step_norm", "slack"):
            out[key][k] = info[key]
        out["lam"][k] = info["lambda"]
        params[k + 1] = learner.P

    w_log, e_log = state.noise_log
    L = adversary.sequence_lipschitz(losses[:T])
    constants = BoundConstants.for_model(model, L, config.radius, m, h)
    return Episode(
        config, m, h, list(losses[:T]), ybuf[pad:].copy(), ys, us,
        out["cost"], out["F"], out["f"], out["eta"], out["H"], out["lam"],
        out["grad_norm"], out["step_norm"], out["slack"], params, w_log, e_log, constants,
    )


# ---------------------------------------------------------------------------
# replay of fixed DRC parameters


@dataclass
class ReplayProblem:
    """sum_{t in range} l_t(c_t + J_t P) for a fixed parameter vector P."""

    c: np.ndarray  # (T, d_z)
    J: np.ndarray  # (T, d_z, n)
    losses: list
    start: int = 0  # zero-based first step included
    _quad: tuple | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.losses = list(self.losses)[self.start :]
        self.c = self.c[self.start :]
        self.J = self.J[self.start :]
        forms = [l.quadratic_form() for l in self.losses]
        if forms and all(f is not None for f in forms):
            Q = np.stack([f[0] for f in forms])
            r = self.c - np.stack([f[1] for f in forms])
            QJ = np.einsum("tab,tbn->tan", Q, self.J)
            Hq = np.einsum("tan,tam->nm", self.J, QJ)
            gq = np.einsum("tan,ta->n", QJ, r)
            kq = float(np.einsum("ta,tab,tb->", r, Q, r))
            self._quad = (0.5 * (Hq + Hq.T), gq, kq)
        elif not forms:
            n = self.J.shape[2] if self.J.ndim == 3 else 0
            self._quad = (np.zeros((n, n)), np.zeros(n), 0.0)

    @property
    def n(self):
        return self.J.shape[2]

    @property
    def empty(self):
        return len(self.losses) == 0

    def points(self, P):
        return self.c + self.J @ P

    def value(self, P):
        P = np.asarray(P, dtype=float)
        if self._quad is not None:
            Hq, gq, kq = self._quad
            return float(P @ Hq @ P + 2.0 * gq @ P + kq)
        return float(sum(l.value(z) for l, z in zip(self.losses, self.points(P))))

    def exact_value(self, P):
        """Loss-by-loss evaluation (no aggregated quadratic form)."""
        return float(sum(l.value(z) for l, z in zip(self.losses, self.points(P))))

    def grad(self, P):
        P = np.asarray(P, dtype=float)
        if self._quad is not None:
            Hq, gq, _ = self._quad
            return 2.0 * (Hq @ P + gq)
        gz = np.stack([l.grad(z) for l, z in zip(self.losses, self.points(P))])
        return np.einsum("tan,ta->n", self.J, gz)

    def smoothness(self):
        if self._quad is not None:
            return 2.0 * float(np.linalg.eigvalsh(self._quad[0])[-1]) if self.n else 0.0
        norms = np.linalg.norm(self.J, ord=2, axis=(1, 2)) ** 2
        return float(sum(adversary.smoothness(l) * s for l, s in zip(self.losses, norms)))


def replay_maps(episode: Episode, truncated=False):
    """Per-step affine maps (c_t, J_t) of z_t = [y_t; u_t] under fixed P.

    ``truncated`` uses y~_t (only the last h inputs act on the output),
    otherwise the full closed-loop output of the plant under the fixed DRC.
    """
    model = episode.model
    m, h, T = episode.m, episode.h, episode.T
    du, dy = model.du, model.dy
    n = m * du * dy
    W = episode.windows[:, :m]  # (T, m, d_y)
    Y = np.zeros((T, du, m, du, dy))
    for i in range(du):
        Y[:, i, :, i, :] = W
    Y = Y.reshape(T, du, n)
    Zy = np.zeros((T, dy, n))
    if truncated:
        G = model.markov_stack(h)
        for s in range(1, h + 1):
            if s < T:
                Zy[s:] += np.einsum("ij,tjn->tin", G[s - 1], Y[:-s])
    else:
        Xi = np.zeros((model.dx, n))
        for k in range(T):
            Zy[k] = model.C @ Xi
            Xi = model.A @ Xi + model.B @ Y[k]
    c = np.hstack([episode.ynat, np.zeros((T, du))])
    return c, np.concatenate([Zy, Y], axis=1)


def replay_problem(episode: Episode, truncated=False, start=0):
    c, J = replay_maps(episode, truncated=truncated)
    return ReplayProblem(c, J, episode.losses, start=start)


@dataclass
class ComparatorResult:
    P: np.ndarray
    cost: float
    converged: bool
    iterations: int
    restart_spread: float


def minimize_on_set(problem: ReplayProblem, cset, x0, max_iter=100_000, rtol=1e-8):
    """Accelerated projected gradient with function-value restarts.

    Stops when the relative objective improvement over an iteration drops
    below ``rtol`` and the projected-gradient step is negligible.
    """
    Lip = problem.smoothness()
    x = cset.project(x0)
    fx = problem.value(x)
    if Lip <= 0:
        return x, fx, True, 0
    step = 1.0 / Lip
    yk, tk = x.copy(), 1.0
    for it in range(1, max_iter + 1):
        x_new = cset.project(yk - step * problem.grad(yk))
        f_new = problem.value(x_new)
        if f_new > fx:
            # momentum overshoot: restart from the last accepted iterate
            yk, tk = x.copy(), 1.0
            x_new = cset.project(x - step * problem.grad(x))
            f_new = problem.value(x_new)
        improvement = fx - f_new
        moved = np.linalg.norm(x_new - x)
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * tk * tk))
        yk = x_new + ((tk - 1.0) / t_next) * (x_new - x)
        tk = t_next
        x, fx = x_new, min(f_new, fx)
        if improvement <= rtol * max(abs(fx), 1e-300) and moved <= 1e-9 * max(1.0, np.linalg.norm(x)):
            return x, fx, True, it
    return x, fx, False, max_iter


def best_fixed_drc(problem: ReplayProblem, cset, restarts=8, seed=0) -> ComparatorResult:
    """Best fixed DRC in hindsight for the replayed problem."""
    if problem.empty:
        return ComparatorResult(np.zeros(cset.dim), 0.0, True, 0, 0.0)
    rng = np.random.default_rng(seed)
    starts = [np.zeros(cset.dim)] + [policy.random_feasible(cset, rng) for _ in range(restarts - 1)]
    results = [minimize_on_set(problem, cset, s) for s in starts]
    values = [r[1] for r in results]
    best = int(np.argmin(values))
    x, fx, conv, it = results[best]
    if not all(r[2] for r in results):
        log.warning("comparator search hit the iteration cap; returning the best iterate")
    return ComparatorResult(x, problem.exact_value(x), all(r[2] for r in results), it, float(max(values) - min(values)))


# ---------------------------------------------------------------------------
# linear dynamic controllers (diagnostic comparator)


@dataclass(frozen=True, eq=False)
class LinearDynamicController:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    @classmethod
    def static(cls, D):
        D = np.atleast_2d(np.asarray(D, dtype=float))
        du, dy = D.shape
        return cls(np.zeros((0, 0)), np.zeros((0, dy)), np.zeros((du, 0)), D)

    @property
    def order(self):
        return self.A.shape[0]

    def closed_loop_radius(self, model):
        A, B, C = model.A, model.B, model.C
        top = np.hstack([A + B @ self.D @ C, B @ self.C])
        bot = np.hstack([self.B @ C, self.A])
        return lti.spectral_radius(np.vstack([top, bot]))


def ldc_rollout(controller: LinearDynamicController, model, w_log, e_log, losses) -> float:
    """Total cost of the closed loop s' = A_pi s + B_pi y, u = C_pi s + D_pi y on logged noise."""
    w_log = np.asarray(w_log, dtype=float).reshape(-1, model.dx)
    e_log = np.asarray(e_log, dtype=float).reshape(-1, model.dy)
    T = min(len(losses), e_log.shape[0])
    x = w_log[0].copy()
    s = np.zeros(controller.order)
    total = 0.0
    for k in range(T):
        y = model.C @ x + e_log[k]
        u = controller.C @ s + controller.D @ y
        total += losses[k](y, u)
        s = controller.A @ s + controller.B @ y
        x = model.A @ x + model.B @ u + w_log[k + 1]
    return total


def ldc_rollouts(controllers, model, w_log, e_log, losses):
    """Batched ldc_rollout for controllers of a common order."""
    if not controllers:
        return np.zeros(0)
    K = len(controllers)
    Ap = np.stack([c.A for c in controllers])
    Bp = np.stack([c.B for c in controllers])
    Cp = np.stack([c.C for c in controllers])
    Dp = np.stack([c.D for c in controllers])
    T = min(len(losses), e_log.shape[0])
    x = np.repeat(w_log[0][None], K, axis=0)
    s = np.zeros((K, Ap.shape[1]))
    ys, us = np.empty((T, K, model.dy)), np.empty((T, K, model.du))
    for k in range(T):
        y = x @ model.C.T + e_log[k]
        u = np.einsum("kij,kj->ki", Cp, s) + np.einsum("kij,kj->ki", Dp, y)
        ys[k], us[k] = y, u
        s = np.einsum("kij,kj->ki", Ap, s) + np.einsum("kij,kj->ki", Bp, y)
        x = x @ model.A.T + u @ model.B.T + w_log[k + 1]
    totals = np.zeros(K)
    for k in range(T):
        z = np.concatenate([ys[k], us[k]], axis=1)
        forms = losses[k].quadratic_form()
        if forms is not None:
            r = z - forms[1]
            totals += np.einsum("ka,ab,kb->k", r, forms[0], r)
        else:
            totals += [losses[k].value(zz) for zz in z]
    return totals


def sample_ldcs(model, count, rng, order=1, gain=0.5):
    """Random stabilising LDCs of a fixed internal order (the zero controller first)."""
    du, dy = model.du, model.dy
    out = [LinearDynamicController(np.zeros((order, order)), np.zeros((order, dy)), np.zeros((du, order)), np.zeros((du, dy)))]
    tries = 0
    while len(out) < count and tries < 100 * count:
        tries += 1
        Ap = rng.uniform(-0.9, 0.9) * np.eye(order) if order else np.zeros((0, 0))
        ctrl = LinearDynamicController(
            Ap,
            gain * rng.standard_normal((order, dy)),
            gain * rng.standard_normal((du, order)),
            gain * rng.standard_normal((du, dy)),
        )
        if ctrl.closed_loop_radius(model) < 0.99:
            out.append(ctrl)
    return out[:count]


# ---------------------------------------------------------------------------
# regret accounting


@dataclass
class RegretDecomposition:
    burn_in: float
    algorithm_truncation: float
    f_policy: float
    comparator_truncation: float
    policy_gap: float  # best fixed DRC minus best sampled LDC (empirical)

    @property
    def drc_regret(self):
        return self.burn_in + self.algorithm_truncation + self.f_policy + self.comparator_truncation


def decompose_regret(episode: Episode, comparator: ComparatorResult, truncated_best=None, ldc_cost=None, seed=0):
    """Split realized cost minus the best fixed DRC cost into the four computable terms.

    The comparator-truncation term is measured against the full-horizon
    comparator so that the four terms add up to the DRC regret exactly.
    """
    k0 = min(episode.m + episode.h, episode.T)
    burn_in = float(episode.cost[:k0].sum())
    alg_trunc = float((episode.cost[k0:] - episode.F[k0:]).sum())
    if truncated_best is None:
        cset = policy.DrcConstraintSet(episode.m, episode.model.du, episode.model.dy, episode.config.radius)
        truncated_best = best_fixed_drc(replay_problem(episode, truncated=True, start=k0), cset, seed=seed)
    f_policy = float(episode.F[k0:].sum()) - truncated_best.cost
    comp_trunc = truncated_best.cost - comparator.cost
    gap = comparator.cost - ldc_cost if ldc_cost is not None else float("nan")
    return RegretDecomposition(burn_in, alg_trunc, f_policy, comp_trunc, gap)


@dataclass
class EpisodeSummary:
    seed: int
    T: int
    case: int | str
    alpha: float
    m: int
    h: int
    realized_cost: float
    comparator_cost: float
    regret: float
    bound: float
    decomposition: RegretDecomposition
    max_drift_excess: float  # max_t ||P_{t+1}-P_t|| - eta_{t+1}(G_f + lambda_t D)
    min_slack: float
    comparator_converged: bool
    restart_spread: float
    episode: Episode | None = None

    def row(self):
        d = self.decomposition
        return {
            "seed": self.seed,
            "T": self.T,
            "case": self.case,
            "alpha": self.alpha,
            "m": self.m,
            "h": self.h,
            "realized_cost": self.realized_cost,
            "comparator_cost": self.comparator_cost,
            "R_T": self.regret,
            "bound": self.bound,
            "burn_in": d.burn_in,
            "algorithm_truncation": d.algorithm_truncation,
            "f_policy": d.f_policy,
            "comparator_truncation": d.comparator_truncation,
            "policy_gap": d.policy_gap,
            "max_drift_excess": self.max_drift_excess,
            "min_slack": self.min_slack,
        }


def drift_excess(episode: Episode):
    """Per-step ||P_{t+1} - P_t|| - eta_{t+1}(G_f + lambda_t D)."""
    c = episode.constants
    return episode.step_norm - episode.eta * (c.G_f + episode.lam * c.D)


def control_bound(episode: Episode):
    return regret_bound_control(episode.constants, episode.H, episode.lam)


def evaluate_episode(config: EpisodeConfig, keep_episode=False) -> EpisodeSummary:
    ep = run_episode(config)
    _, _, _, comp_seq = _seed_streams(config.seed)
    comp_seed = int(comp_seq.generate_state(1)[0])
    cset = policy.DrcConstraintSet(ep.m, ep.model.du, ep.model.dy, config.radius)
    best = best_fixed_drc(replay_problem(ep), cset, seed=comp_seed)
    k0 = min(ep.m + ep.h, ep.T)
    tbest = best_fixed_drc(replay_problem(ep, truncated=True, start=k0), cset, seed=comp_seed)
    ldc_cost = None
    if config.ldc_samples > 0:
        ctrls = sample_ldcs(ep.model, config.ldc_samples, np.random.default_rng(comp_seed))
        ldc_cost = float(ldc_rollouts(ctrls, ep.model, ep.w_log, ep.e_log, ep.losses).min())
    dec = decompose_regret(ep, best, truncated_best=tbest, ldc_cost=ldc_cost)
    realized = float(ep.cost.sum())
    return EpisodeSummary(
        config.seed, config.T, config.case, config.alpha, ep.m, ep.h, realized, best.cost,
        realized - best.cost, control_bound(ep), dec, float(drift_excess(ep).max()),
        float(ep.slack.min()), best.converged and tbest.converged, best.restart_spread,
        ep if keep_episode else None,
    )


# ---------------------------------------------------------------------------
# rate fitting


@dataclass
class RateFit:
    exponent: float
    intercept: float
    horizons: np.ndarray
    regrets: np.ndarray
    log_ratios: np.ndarray  # R_i / log T_i

    def log_ratio_growth(self):
        """(R/log T) at the largest horizon over that at the second largest."""
        return float(self.log_ratios[-1] / self.log_ratios[-2])


def fit_rate(horizons, regrets) -> RateFit:
    """OLS slope of log R against log T."""
    T = np.asarray(horizons, dtype=float)
    R = np.asarray(regrets, dtype=float)
    if T.shape != R.shape:
        raise ValueError("horizons and regrets must align")
    keep = R > 0
    if not keep.all():
        warnings.warn(f"excluding {int((~keep).sum())} nonpositive regret values from the rate fit", stacklevel=2)
    T, R = T[keep], R[keep]
    if T.size < 4:
        raise ValueError(f"rate fit needs at least 4 positive points, got {T.size}")
    if np.any(np.diff(T) <= 0):
        raise ValueError("horizons must be strictly increasing")
    ratios = T[1:] / T[:-1]
    if not np.allclose(ratios, ratios[0], rtol=1e-6):
        warnings.warn("horizons are not geometrically spaced", stacklevel=2)
    slope, intercept = np.polyfit(np.log(T), np.log(R), 1)
    return RateFit(float(slope), float(intercept), T, R, R / np.log(T))
