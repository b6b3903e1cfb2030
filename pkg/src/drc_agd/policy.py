"""Disturbance response controller parameters, constraint set and control law.

The parameter vector P stacks the rows of M^[0], ..., M^[m-1]: with
q = d_u d_y, entries P[s q + j d_y : s q + (j+1) d_y] hold row j of M^[s].
That is exactly a row-major flattening of an (m, d_u, d_y) array.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def vectorize(blocks) -> np.ndarray:
    blocks = np.asarray(blocks, dtype=float)
    if blocks.ndim != 3:
        raise ValueError(f"expected (m, d_u, d_y) blocks, got shape {blocks.shape}")
    return blocks.reshape(-1).copy()


def devectorize(P, m, du, dy) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    if P.size != m * du * dy:
        raise ValueError(f"vector of length {P.size} does not hold m={m} blocks of {du}x{dy}")
    return P.reshape(m, du, dy)


@dataclass(frozen=True, eq=False)
class DrcParams:
    m: int
    du: int
    dy: int
    P: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float).reshape(-1)
        if P.size != self.m * self.du * self.dy:
            raise ValueError("parameter vector length does not match (m, d_u, d_y)")
        object.__setattr__(self, "P", P)

    @classmethod
    def zeros(cls, m, du, dy):
        return cls(m, du, dy, np.zeros(m * du * dy))

    @classmethod
    def from_blocks(cls, blocks):
        blocks = np.asarray(blocks, dtype=float)
        m, du, dy = blocks.shape
        return cls(m, du, dy, vectorize(blocks))

    @property
    def blocks(self):
        return devectorize(self.P, self.m, self.du, self.dy)

    def to_record(self):
        """Header plus flat row-major entries, as written to traces."""
        return {"m": self.m, "d_u": self.du, "d_y": self.dy, "P": self.P.tolist()}

    @classmethod
    def from_record(cls, rec):
        return cls(int(rec["m"]), int(rec["d_u"]), int(rec["d_y"]), np.asarray(rec["P"], dtype=float))


@dataclass(frozen=True)
class DrcConstraintSet:
    """{P : sum_s ||M^[s]||_F <= radius}."""

    m: int
    du: int
    dy: int
    radius: float

    @property
    def group_size(self):
        return self.du * self.dy

    @property
    def dim(self):
        return self.m * self.du * self.dy

    def group_norms(self, P):
        return np.linalg.norm(np.asarray(P, dtype=float).reshape(self.m, -1), axis=1)

    def slack(self, P):
        """radius - sum of group norms (nonnegative iff feasible)."""
        return self.radius - float(self.group_norms(P).sum())

    def contains(self, P, tol=1e-9):
        return self.slack(P) >= -tol

    def project(self, P):
        return project(P, self)


def _l1_ball_threshold(v, radius):
    # theta >= 0 with sum(max(v - theta, 0)) = radius, for v >= 0 and sum(v) > radius
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    idx = np.arange(1, u.size + 1)
    cond = u - (css - radius) / idx > 0
    rho = idx[cond][-1]
    return (css[rho - 1] - radius) / rho


def project(P, cset: DrcConstraintSet) -> np.ndarray:
    """Euclidean projection onto the group-norm ball.

    Group norms are projected onto the l1 ball (sorted soft-threshold), then
    each group is rescaled to its new norm.
    """
    P = np.asarray(P, dtype=float).reshape(-1)
    groups = P.reshape(cset.m, -1)
    norms = np.linalg.norm(groups, axis=1)
    if norms.sum() <= cset.radius:
        return P.copy()
    if cset.radius <= 0:
        return np.zeros_like(P)
    theta = _l1_ball_threshold(norms, cset.radius)
    shrunk = np.maximum(norms - theta, 0.0)
    scale = np.divide(shrunk, norms, out=np.zeros_like(norms), where=norms > 0)
    return (groups * scale[:, None]).reshape(-1)


def random_feasible(cset: DrcConstraintSet, rng, fill=None):
    """A random point of the constraint set; ``fill`` in (0, 1] sets the norm budget used."""
    P = rng.standard_normal(cset.dim)
    weights = rng.dirichlet(np.ones(cset.m))
    fill = rng.random() if fill is None else fill
    groups = P.reshape(cset.m, -1)
    norms = np.linalg.norm(groups, axis=1)
    norms[norms == 0] = 1.0
    groups = groups / norms[:, None] * (weights * fill * cset.radius)[:, None]
    return groups.reshape(-1)


def control_input(M, ynat_history) -> np.ndarray:
    """u_t = sum_{s=0}^{m-1} M^[s] y^nat_{t-s}.

    ``M`` is a DrcParams or an (m, d_u, d_y) array; ``ynat_history`` lists
    y^nat_t, y^nat_{t-1}, ... newest first.  Missing entries (t < m) count as
    zero.
    """
    blocks = M.blocks if isinstance(M, DrcParams) else np.asarray(M, dtype=float)
    m, du, dy = blocks.shape
    hist = np.asarray(ynat_history, dtype=float).reshape(-1, dy)
    k = min(m, hist.shape[0])
    if k == 0:
        return np.zeros(du)
    return np.einsum("sij,sj->i", blocks[:k], hist[:k])


def input_map(window, du) -> np.ndarray:
    """Matrix Y with u = Y P for the given newest-first y^nat window of length m."""
    window = np.asarray(window, dtype=float)
    m, dy = window.shape
    Y = np.zeros((du, m, du, dy))
    for i in range(du):
        Y[i, :, i, :] = window
    return Y.reshape(du, m * du * dy)


def diameter(du, dy, radius) -> float:
    """D = 2 sqrt(min(d_u, d_y)) R_M."""
    if du <= 0 or dy <= 0 or radius <= 0:
        raise ValueError("diameter arguments must be positive")
    return 2.0 * math.sqrt(min(du, dy)) * radius
