"""Synthetic online convex optimisation instances with and without memory.

Each instance uses quadratic losses

    F_t(w_0, ..., w_h) = 1/2 || sum_k K_{t,k} w_k - b_t ||^2,
    f_t(u) = F_t(u, ..., u) = 1/2 || S_t u - b_t ||^2,  S_t = sum_k K_{t,k},

over the Euclidean ball of radius r, so curvature, gradient and coordinate
Lipschitz scales have closed forms.  ``w_k`` is the decision played k steps
ago.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .learner import OcomConstants, StepState, ball_projection, oco_update, regret_bound_ocom


@dataclass(frozen=True, eq=False)
class OcomInstance:
    K: np.ndarray  # (T, h+1, d_out, d)
    b: np.ndarray  # (T, d_out)
    radius: float
    lam: np.ndarray  # (T,) non-increasing regularisation weights

    @property
    def T(self):
        return self.K.shape[0]

    @property
    def h(self):
        return self.K.shape[1] - 1

    @property
    def dim(self):
        return self.K.shape[3]

    @property
    def S(self):
        return self.K.sum(axis=1)

    @property
    def curvature(self):
        """H_t = lambda_min(S_t^T S_t), the exact strong convexity of f_t."""
        S = self.S
        return np.maximum(np.linalg.eigvalsh(np.einsum("tji,tjk->tik", S, S))[:, 0], 0.0)

    def constants(self) -> OcomConstants:
        S = self.S
        r = self.radius
        bn = np.linalg.norm(self.b, axis=1)
        s2 = np.linalg.norm(S, 2, axis=(1, 2))
        # grad f_t(u) = S^T (S u - b)
        G_f = float(np.max(s2 * (s2 * r + bn)))
        # grad_{w_k} F_t = K_k^T (sum_j K_j w_j - b) with ||(w_0..w_h)|| <= r sqrt(h+1)
        T, hp1, dout, d = self.K.shape
        stacked = self.K.transpose(0, 2, 1, 3).reshape(T, dout, hp1 * d)
        kn = np.linalg.norm(stacked, 2, axis=(1, 2))
        G_c = float(np.max(kn * (kn * r * np.sqrt(hp1) + bn)))
        # D bounds the diameter of the ball
        return OcomConstants(D=2.0 * r, G_f=G_f, G_c=G_c, h=self.h)

    def F(self, t, window):
        """F_t at the window (w_0, ..., w_h), newest first."""
        z = np.einsum("kij,kj->i", self.K[t], window) - self.b[t]
        return 0.5 * float(z @ z)

    def f_grad(self, t, u):
        S = self.S[t]
        return S.T @ (S @ u - self.b[t])

    def bound(self):
        return regret_bound_ocom(self.constants(), self.curvature, self.lam)


def random_instance(rng, T=200, dim=None, h=None, radius=None, dout=None) -> OcomInstance:
    """Random instance with a random non-increasing regularisation schedule.

    Half of the instances use rank-deficient blocks, so f_t may carry no
    curvature; those always receive lambda_1 = sqrt(T).
    """
    dim = int(rng.integers(1, 5)) if dim is None else dim
    h = int(rng.integers(0, 4)) if h is None else h
    radius = float(rng.uniform(0.5, 2.0)) if radius is None else radius
    deficient = rng.random() < 0.5
    if dout is None:
        dout = int(rng.integers(1, dim + 1)) if deficient else dim + int(rng.integers(0, 2))
    scale = rng.uniform(0.3, 1.5)
    K = rng.standard_normal((T, h + 1, dout, dim)) * scale / np.sqrt(h + 1)
    b = rng.standard_normal((T, dout)) * rng.uniform(0.2, 2.0)
    kind = rng.integers(3)
    lam = np.zeros(T)
    if deficient or kind == 0:
        lam[0] = np.sqrt(T)
    elif kind == 1:
        lam = np.sort(rng.exponential(0.5, T))[::-1]
    inst = OcomInstance(K, b, radius, lam)
    if inst.curvature[0] + lam[0] <= 0:
        lam = lam.copy()
        lam[0] = np.sqrt(T)
        inst = OcomInstance(K, b, radius, lam)
    return inst


def ball_quadratic_min(A, c, radius, tol=1e-13):
    """argmin_{||u|| <= r} 1/2 u^T A u - c^T u for PSD A (trust-region subproblem)."""
    w, V = np.linalg.eigh(A)
    w = np.maximum(w, 0.0)
    g = V.T @ c

    def point(mu):
        with np.errstate(divide="ignore", invalid="ignore"):
            x = np.where(w + mu > 0, g / (w + mu), 0.0)
        return V @ x

    # unconstrained minimiser (least norm when singular) if it is feasible
    inner = np.where(w > tol * max(1.0, w.max()), g / np.where(w > 0, w, 1.0), 0.0)
    if np.linalg.norm(inner) <= radius and np.all(np.abs(g[w <= tol * max(1.0, w.max())]) <= 1e-12):
        return V @ inner
    lo, hi = 0.0, max(1.0, np.linalg.norm(c) / radius)
    while np.linalg.norm(point(hi)) > radius:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.linalg.norm(point(mid)) > radius:
            lo = mid
        else:
            hi = mid
    return point(hi)


@dataclass(frozen=True)
class OcomResult:
    regret: float
    bound: float
    max_drift_excess: float  # max_t ||u_{t+1}-u_t|| - eta_{t+1}(G_f + lambda_t D)


def run_instance(inst: OcomInstance) -> OcomResult:
    """Play the adaptive update on ``inst``; regret counts steps t > h."""
    T, h, d = inst.T, inst.h, inst.dim
    project = ball_projection(inst.radius)
    H = inst.curvature
    const = inst.constants()
    u = np.zeros(d)
    played = np.zeros((T, d))
    state = StepState()
    cost = 0.0
    drift = -np.inf
    for t in range(T):
        played[t] = u
        if t >= h:
            cost += inst.F(t, played[t - h : t + 1][::-1])
        u_next, state, eta = oco_update(u, inst.f_grad(t, u), inst.lam[t], H[t], state, project)
        drift = max(drift, np.linalg.norm(u_next - u) - eta * (const.G_f + inst.lam[t] * const.D))
        u = u_next
    S = inst.S[h:]
    A = np.einsum("tji,tjk->ik", S, S)
    c = np.einsum("tji,tj->i", S, inst.b[h:])
    best = ball_quadratic_min(A, c, inst.radius)
    r = np.einsum("tij,j->ti", S, best) - inst.b[h:]
    best_cost = 0.5 * float(np.sum(r * r))
    return OcomResult(cost - best_cost, inst.bound(), float(drift))
