"""Convex loss sequences over z = [y; u] with certified curvature and Lipschitz scales.

Every loss satisfies the local Lipschitz condition

    |l(z) - l(z')| <= L * max(||z||, ||z'||, 1) * ||z - z'||

with the ``lipschitz`` value it carries, and its Hessian dominates
``curvature`` times the identity.

Generators draw each component from its own child stream of the seed, so
the loss at step t does not depend on the horizon it was generated for.
"""

from __future__ import annotations

import numpy as np

LOSS_KINDS = ("quadratic", "rank-deficient-quadratic", "smoothed-absolute")


class LossSpec:
    kind = "abstract"

    def value(self, z):
        raise NotImplementedError

    def grad(self, z):
        raise NotImplementedError

    def __call__(self, y, u):
        return self.value(np.concatenate([np.ravel(y), np.ravel(u)]))

    @property
    def curvature(self):
        return self._curvature

    @property
    def lipschitz(self):
        return self._lipschitz

    def quadratic_form(self):
        """(Q, b) with l(z) = (z - b)^T Q (z - b), or None."""
        return None


class QuadraticLoss(LossSpec):
    """l(z) = (z - b)^T Q (z - b) with Q symmetric PSD."""

    kind = "quadratic"

    def __init__(self, Q, b, curvature=None, kind=None):
        Q = np.asarray(Q, dtype=float)
        Q = 0.5 * (Q + Q.T)
        self.Q = Q
        self.b = np.asarray(b, dtype=float).reshape(-1)
        if kind is not None:
            self.kind = kind
        if curvature is None:
            curvature = max(0.0, 2.0 * float(np.linalg.eigvalsh(Q)[0]))
        self._curvature = float(curvature)
        self._lipschitz = 2.0 * float(np.linalg.norm(Q, 2)) * (1.0 + float(np.linalg.norm(self.b)))

    @property
    def dim(self):
        return self.b.size

    def value(self, z):
        r = np.asarray(z, dtype=float) - self.b
        return float(r @ self.Q @ r)

    def grad(self, z):
        return 2.0 * self.Q @ (np.asarray(z, dtype=float) - self.b)

    def hessian(self, z=None):
        return 2.0 * self.Q

    def quadratic_form(self):
        return self.Q, self.b


def rank_one_loss(a, beta):
    """l(z) = (a^T z - beta)^2, written as a quadratic centred at beta a / ||a||^2."""
    a = np.asarray(a, dtype=float).reshape(-1)
    nrm2 = float(a @ a)
    b = beta * a / nrm2 if nrm2 > 0 else np.zeros_like(a)
    curv = None if a.size == 1 else 0.0
    return QuadraticLoss(np.outer(a, a), b, curvature=curv, kind="rank-deficient-quadratic")


class SmoothedAbsoluteLoss(LossSpec):
    """l(z) = sum_i w_i (sqrt((z_i - b_i)^2 + delta^2) - delta)."""

    kind = "smoothed-absolute"

    def __init__(self, weights, b, delta=0.1):
        self.w = np.asarray(weights, dtype=float).reshape(-1)
        self.b = np.asarray(b, dtype=float).reshape(-1)
        if np.any(self.w < 0):
            raise ValueError("weights must be nonnegative")
        if delta <= 0:
            raise ValueError("delta must be positive")
        self.delta = float(delta)
        self._curvature = 0.0
        self._lipschitz = float(np.linalg.norm(self.w))

    @property
    def dim(self):
        return self.b.size

    def value(self, z):
        r = np.asarray(z, dtype=float) - self.b
        return float(self.w @ (np.sqrt(r * r + self.delta**2) - self.delta))

    def grad(self, z):
        r = np.asarray(z, dtype=float) - self.b
        return self.w * r / np.sqrt(r * r + self.delta**2)

    def hessian(self, z):
        r = np.asarray(z, dtype=float) - self.b
        return np.diag(self.w * self.delta**2 / (r * r + self.delta**2) ** 1.5)

    @property
    def smoothness(self):
        return float(self.w.max()) / self.delta


def curvature(spec: LossSpec) -> float:
    """Certified floor H^l with Hessian >= H^l I."""
    return spec.curvature


def smoothness(spec: LossSpec) -> float:
    """Upper bound on the Hessian's spectral norm."""
    if isinstance(spec, QuadraticLoss):
        return 2.0 * float(np.linalg.norm(spec.Q, 2))
    return spec.smoothness


def _streams(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _random_rotations(rng, T, d):
    g = rng.standard_normal((T, d, d))
    q, r = np.linalg.qr(g)
    signs = np.sign(np.diagonal(r, axis1=1, axis2=2))
    signs[signs == 0] = 1.0
    return q * signs[:, None, :]


def _ball_points(rng, T, d, radius):
    g = rng.standard_normal((T, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return g * (radius * rng.random((T, 1)) ** (1.0 / d))


def decaying_curvature_sequence(alpha, H, T, seed, dim=2, target_radius=0.5, condition=2.0):
    """Quadratics whose Hessian floor is exactly H t^{-alpha}.

    Q_t = U_t diag(H t^{-alpha}, H k_2, ..., H k_d) U_t^T / 2 with k_i uniform
    in [1, condition] and a fresh random rotation U_t each step.  Only the
    weakest direction decays, so the gradient scale stays put while the
    curvature floor shrinks.  Targets b_t are drawn in a ball of radius
    ``target_radius`` with random sign flips.
    """
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    if H <= 0:
        raise ValueError("curvature scale H must be positive")
    rot_rng, spec_rng, tgt_rng, sign_rng = _streams(seed, 4)
    U = _random_rotations(rot_rng, T, dim)
    k = np.ones((T, dim))
    if dim > 1:
        k[:, 1:] = 1.0 + (condition - 1.0) * spec_rng.random((T, dim - 1))
    b = _ball_points(tgt_rng, T, dim, target_radius) * sign_rng.choice([-1.0, 1.0], size=(T, 1))
    floors = H * np.arange(1, T + 1, dtype=float) ** (-alpha)
    losses = []
    k *= H
    k[:, 0] = floors
    for t in range(T):
        Q = 0.5 * (U[t] * k[t]) @ U[t].T
        losses.append(QuadraticLoss(Q, b[t], curvature=floors[t]))
    return losses


def convex_only_sequence(T, seed, dim=2, scale=1.0, target_radius=0.5):
    """Rank-one quadratics l_t(z) = (a_t^T z - beta_t)^2 with adversarial directions.

    ||a_t|| = scale; directions are uniformly random with per-step sign flips,
    beta_t is uniform in [-target_radius, target_radius].
    """
    dir_rng, tgt_rng, sign_rng = _streams(seed, 3)
    a = dir_rng.standard_normal((T, dim))
    a *= scale / np.linalg.norm(a, axis=1, keepdims=True)
    a *= sign_rng.choice([-1.0, 1.0], size=(T, 1))
    beta = target_radius * (2.0 * tgt_rng.random(T) - 1.0)
    return [rank_one_loss(a[t], beta[t]) for t in range(T)]


def smoothed_absolute_sequence(T, seed, dim=2, delta=0.1, target_radius=0.5):
    w_rng, tgt_rng = _streams(seed, 2)
    w = 0.5 + w_rng.random((T, dim))
    b = _ball_points(tgt_rng, T, dim, target_radius)
    return [SmoothedAbsoluteLoss(w[t], b[t], delta) for t in range(T)]


def make_sequence(family, T, seed, dim, alpha=0.0, H=1.0, target_radius=0.5, **kw):
    if family == "quadratic":
        return decaying_curvature_sequence(alpha, H, T, seed, dim=dim, target_radius=target_radius, **kw)
    if family == "rank-deficient-quadratic":
        return convex_only_sequence(T, seed, dim=dim, target_radius=target_radius, **kw)
    if family == "smoothed-absolute":
        return smoothed_absolute_sequence(T, seed, dim=dim, target_radius=target_radius, **kw)
    raise ValueError(f"unknown loss family {family!r}; expected one of {LOSS_KINDS}")


def lipschitz_violations(spec: LossSpec, radius, rng, pairs=1000):
    """Count sampled pairs within ``radius`` that break the declared Lipschitz scale."""
    d = spec.dim
    z1 = _ball_points(rng, pairs, d, radius)
    z2 = _ball_points(rng, pairs, d, radius)
    bad = 0
    for a, b in zip(z1, z2):
        r = max(np.linalg.norm(a), np.linalg.norm(b), 1.0)
        lhs = abs(spec.value(a) - spec.value(b))
        if lhs > spec.lipschitz * r * np.linalg.norm(a - b) + 1e-9:
            bad += 1
    return bad


def convexity_violations(spec: LossSpec, radius, rng, segments=1000):
    d = spec.dim
    z1 = _ball_points(rng, segments, d, radius)
    z2 = _ball_points(rng, segments, d, radius)
    lam = rng.random(segments)
    bad = 0
    for a, b, s in zip(z1, z2, lam):
        mid = spec.value(s * a + (1 - s) * b)
        if mid > s * spec.value(a) + (1 - s) * spec.value(b) + 1e-9 * max(1.0, abs(mid)):
            bad += 1
    return bad


def sequence_lipschitz(losses):
    """Single L valid for the whole sequence."""
    return max(l.lipschitz for l in losses)


def curvature_stream(losses):
    return np.array([l.curvature for l in losses])

