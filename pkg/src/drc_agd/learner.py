"""Adaptive-gradient online learners and closed-form regret bounds.

The step rate follows eta_{t+1} = 1 / (sum H_{1:t} + sum lambda_{1:t}); the
update at step t regularises with g_t(u) = lambda_t ||u||^2 / 2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import policy
from .truncated import LossContext, memoryless_gradient

LAMBDA_CASES = ("convex", "strongly-convex", "decaying-alpha-low", "decaying-alpha-high", "custom")
CASE_IDS = {1: "convex", 2: "strongly-convex", 3: "decaying-alpha-low", 4: "decaying-alpha-high"}


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class StepState:
    sum_H: float = 0.0
    sum_lambda: float = 0.0
    t: int = 0

    def advance(self, H, lam):
        if H < 0 or lam < 0:
            raise ConfigurationError(f"curvature and regularisation must be nonnegative (H={H}, lambda={lam})")
        return StepState(self.sum_H + H, self.sum_lambda + lam, self.t + 1)


def step_rate(state: StepState) -> float:
    denom = state.sum_H + state.sum_lambda
    if not denom > 0:
        raise ConfigurationError(
            f"step rate undefined at t={state.t}: sum H + sum lambda = 0; "
            "use a positive lambda_1 when the first losses carry no curvature"
        )
    return 1.0 / denom


def oco_update(u, grad_f, lam, H, state: StepState, project):
    """One adaptive OGD step; returns (u_{t+1}, advanced state, eta_{t+1})."""
    state = state.advance(H, lam)
    eta = step_rate(state)
    u = np.asarray(u, dtype=float)
    return project(u - eta * (np.asarray(grad_f, dtype=float) + lam * u)), state, eta


def ball_projection(radius):
    def project(u):
        n = np.linalg.norm(u)
        return u if n <= radius else u * (radius / n)

    return project


def drc_agd_update(P, ctx: LossContext, lam, H, state: StepState, cset: policy.DrcConstraintSet, grad=None):
    """P_{t+1} = Proj(P_t - eta_{t+1} (grad f_t(P_t) + lambda_t P_t)).

    ``H`` is the decision-space curvature (see strong_convexity_transfer);
    ``grad`` overrides the realized gradient (e.g. a Monte-Carlo estimate).
    """
    if grad is None:
        grad = memoryless_gradient(P, ctx)
    P_next, state, eta = oco_update(P, grad, lam, H, state, cset.project)
    return P_next, state, eta, grad


def strong_convexity_transfer(H_l, sigma_w2, sigma_e2, C, A) -> float:
    """H_t = H^l (sigma_e^2 + sigma_w^2 (sigma_min(C) / (1 + ||A||^2))^2)."""
    if min(H_l, sigma_w2, sigma_e2) < 0:
        raise ValueError("inputs must be nonnegative")
    smin = float(np.linalg.svd(np.atleast_2d(C), compute_uv=False).min())
    a2 = float(np.linalg.norm(np.atleast_2d(A), 2)) ** 2
    return float(H_l) * (sigma_e2 + sigma_w2 * (smin / (1.0 + a2)) ** 2)


def transfer_factor(model) -> float:
    """Multiplier turning a loss curvature floor into decision-space curvature."""
    return strong_convexity_transfer(1.0, model.noise_w.variance_floor, model.noise_e.variance_floor, model.C, model.A)


@dataclass(frozen=True, eq=False)
class LambdaSchedule:
    kind: str
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1)
        if np.any(v < 0):
            raise ConfigurationError("lambda schedule must be nonnegative")
        if np.any(np.diff(v) > 0):
            i = int(np.argmax(np.diff(v) > 0))
            raise ConfigurationError(
                f"lambda schedule must be non-increasing (lambda_j <= lambda_i for j >= i); "
                f"lambda_{i + 2}={v[i + 1]:g} > lambda_{i + 1}={v[i]:g}"
            )
        object.__setattr__(self, "values", v)

    def __getitem__(self, t):
        """lambda_t for 1-based t; zero beyond the stored sequence."""
        return float(self.values[t - 1]) if t - 1 < self.values.size else 0.0

    def __len__(self):
        return self.values.size


def make_lambda_schedule(case, T, H_tilde=None, alpha=None, values=None) -> LambdaSchedule:
    """Regularisation weights for the four curvature regimes (or a custom list).

    case 1: lambda_1 = sqrt(T); case 2: all zero (needs H_tilde > 0);
    case 3: lambda_1 = H_tilde T^alpha for alpha <= 1/2;
    case 4: lambda_1 = H_tilde T^{1/2} for alpha > 1/2.  Later weights are zero.
    """
    kind = CASE_IDS.get(case, case)
    if kind == "custom":
        if values is None:
            raise ConfigurationError("custom lambda schedule needs explicit values")
        return LambdaSchedule("custom", values)
    if kind not in LAMBDA_CASES:
        raise ConfigurationError(f"unknown schedule case {case!r}")
    if T < 4:
        raise ConfigurationError(f"horizon T={T} is below the T >= 4 precondition of the curvature-regime schedules")
    lam = np.zeros(T)
    if kind == "convex":
        lam[0] = math.sqrt(T)
    elif kind == "strongly-convex":
        if not H_tilde or H_tilde <= 0:
            raise ConfigurationError("strongly-convex schedule needs H_tilde > 0 (eta_2 would divide by zero)")
    else:
        if not H_tilde or H_tilde <= 0:
            raise ConfigurationError(f"{kind} schedule needs H_tilde > 0")
        if alpha is None:
            raise ConfigurationError(f"{kind} schedule needs alpha")
        if kind == "decaying-alpha-low":
            if not 0 < alpha <= 0.5:
                raise ConfigurationError(f"case 3 needs 0 < alpha <= 1/2, got {alpha}")
            lam[0] = H_tilde * T**alpha
        else:
            if alpha <= 0.5:
                raise ConfigurationError(f"case 4 needs alpha > 1/2, got {alpha}")
            lam[0] = H_tilde * math.sqrt(T)
    return LambdaSchedule(kind, lam)


@dataclass(frozen=True)
class OcomConstants:
    D: float
    G_f: float
    G_c: float
    h: int

    def g_tilde(self, lam):
        base = self.G_f + np.asarray(lam, dtype=float) * self.D
        return np.sqrt(base * (base + 2.0 * self.G_c * self.h**1.5))


@dataclass(frozen=True)
class BoundConstants:
    L: float
    R_M: float
    R_G: float
    R_nat: float
    m: int
    h: int
    du: int
    dy: int

    @classmethod
    def for_model(cls, model, L, R_M, m, h):
        return cls(L, R_M, model.r_g, model.r_nat, m, h, model.du, model.dy)

    @property
    def G_f(self):
        return self.L * math.sqrt(self.m) * self.R_M * self.R_G * self.R_nat**2

    @property
    def G_c(self):
        return self.G_f

    @property
    def D(self):
        return policy.diameter(self.du, self.dy, self.R_M)

    @property
    def G_hat_sq(self):
        return 2.0 * self.G_f**2 + self.G_c**2 * self.h**3

    def g_tilde(self, lam):
        return OcomConstants(self.D, self.G_f, self.G_c, self.h).g_tilde(lam)

    @property
    def burn_in_constant(self):
        """R_M^2 R_G*^2 R_nat^2 (6L + 4(m+h))."""
        return (self.R_M * self.R_G * self.R_nat) ** 2 * (6.0 * self.L + 4.0 * (self.m + self.h))

    @property
    def burn_in_loss_bound(self):
        return 4.0 * (self.R_G * self.R_nat * self.R_M) ** 2 * (self.m + self.h)


def _denominators(H, lam):
    H = np.asarray(H, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if H.shape != lam.shape:
        raise ValueError("curvature and lambda streams must have equal length")
    denom = np.cumsum(H) + np.cumsum(lam)
    if np.any(denom <= 0):
        raise ConfigurationError("sum H_{1:t} + sum lambda_{1:t} vanishes; bound undefined")
    return denom


def regret_bound_oco(D, G, H, lam) -> float:
    """D^2 lambda_{1:T} / 2 + sum (G_t + lambda_t D)^2 / (2 (H_{1:t} + lambda_{1:t}))."""
    lam = np.asarray(lam, dtype=float)
    G = np.broadcast_to(np.asarray(G, dtype=float), lam.shape)
    denom = _denominators(H, lam)
    return float(0.5 * D**2 * lam.sum() + 0.5 * np.sum((G + lam * D) ** 2 / denom))


def regret_bound_ocom(constants, H, lam) -> float:
    """Memory version: G_t + lambda_t D replaced by G~_{f,t}."""
    lam = np.asarray(lam, dtype=float)
    denom = _denominators(H, lam)
    gt = constants.g_tilde(lam)
    return float(0.5 * constants.D**2 * lam.sum() + 0.5 * np.sum(gt**2 / denom))


def regret_bound_control(constants: BoundConstants, H, lam) -> float:
    return constants.burn_in_constant + regret_bound_ocom(constants, H, lam)


@dataclass
class DrcAgdLearner:
    """Stateful wrapper running the online DRC-AGD updates."""

    cset: policy.DrcConstraintSet
    schedule: LambdaSchedule
    curvature_factor: float
    P: np.ndarray = None
    state: StepState = field(default_factory=StepState)

    def __post_init__(self):
        if self.P is None:
            self.P = np.zeros(self.cset.dim)
        if not self.cset.contains(self.P):
            raise ConfigurationError("initial parameters are outside the constraint set")

    def update(self, ctx: LossContext, H_l, grad=None):
        t = self.state.t + 1
        lam = self.schedule[t]
        H = H_l * self.curvature_factor
        P_next, self.state, eta, grad = drc_agd_update(self.P, ctx, lam, H, self.state, self.cset, grad=grad)
        info = {
            "eta": eta,
            "H": H,
            "lambda": lam,
            "grad_norm": float(np.linalg.norm(grad)),
            "step_norm": float(np.linalg.norm(P_next - self.P)),
            "param_norm": float(np.linalg.norm(self.P)),
            "slack": self.cset.slack(P_next),
        }
        self.P = P_next
        return info
