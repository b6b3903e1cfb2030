"""Truncated output, h-memory loss F_t, memory-less loss f_t and its gradient.

Windows are stored newest first: ``ynat_window[k]`` is y^nat_{t-k} for
k = 0, ..., m+h-1, zero where t-k < 1.  Parameter windows are oldest
first, (P_{t-h}, ..., P_t), as in the online protocol.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .adversary import LossSpec
from .policy import input_map


@dataclass(frozen=True, eq=False)
class LossContext:
    t: int
    ynat_window: np.ndarray  # (m + h, d_y), newest first
    markov_ops: np.ndarray  # (h, d_y, d_u): G^[1..h]
    loss: LossSpec
    m: int
    h: int
    du: int

    def __post_init__(self):
        w = np.asarray(self.ynat_window, dtype=float)
        if w.ndim != 2 or w.shape[0] != self.m + self.h:
            raise ValueError(f"y^nat window must have {self.m + self.h} rows, got shape {w.shape}")
        G = np.asarray(self.markov_ops, dtype=float)
        if G.shape != (self.h, w.shape[1], self.du):
            raise ValueError(f"Markov operators must have shape {(self.h, w.shape[1], self.du)}, got {G.shape}")
        object.__setattr__(self, "ynat_window", w)
        object.__setattr__(self, "markov_ops", G)

    @property
    def dy(self):
        return self.ynat_window.shape[1]

    @property
    def n_params(self):
        return self.m * self.du * self.dy

    def with_window(self, window):
        return LossContext(self.t, window, self.markov_ops, self.loss, self.m, self.h, self.du)


def _blocks(P, ctx):
    return np.asarray(P, dtype=float).reshape(ctx.m, ctx.du, ctx.dy)


def _inputs(params_window, ctx):
    # u_{t-s} for s = 0..h from the window entry P_{t-s}
    if len(params_window) != ctx.h + 1:
        raise ValueError(f"expected {ctx.h + 1} parameter entries, got {len(params_window)}")
    W = ctx.ynat_window
    us = np.empty((ctx.h + 1, ctx.du))
    for s in range(ctx.h + 1):
        M = _blocks(params_window[ctx.h - s], ctx)
        us[s] = np.einsum("kij,kj->i", M, W[s : s + ctx.m])
    return us


def truncated_output(params_window, ctx: LossContext) -> np.ndarray:
    """y~_t = y^nat_t + sum_{s=1}^h G^[s] u_{t-s}(P_{t-s})."""
    us = _inputs(params_window, ctx)
    out = ctx.ynat_window[0].copy()
    if ctx.h:
        out += np.einsum("sij,sj->i", ctx.markov_ops, us[1:])
    return out


def memory_loss_F(params_window, ctx: LossContext) -> float:
    us = _inputs(params_window, ctx)
    y = ctx.ynat_window[0].copy()
    if ctx.h:
        y += np.einsum("sij,sj->i", ctx.markov_ops, us[1:])
    return ctx.loss(y, us[0])


def affine_map(ctx: LossContext):
    """(c, J) with z(P) = [y~_t(P,...,P); u_t(P)] = c + J P."""
    W = ctx.ynat_window
    du, dy = ctx.du, ctx.dy
    Y = np.stack([input_map(W[s : s + ctx.m], du) for s in range(ctx.h + 1)])
    Z = np.einsum("sij,sjn->in", ctx.markov_ops, Y[1:]) if ctx.h else np.zeros((dy, ctx.n_params))
    c = np.concatenate([W[0], np.zeros(du)])
    return c, np.vstack([Z, Y[0]])


@lru_cache(maxsize=64)
def _lag_index(m, h):
    # row s holds the window positions s, ..., s+m-1 used by u_{t-s}
    return np.arange(h + 1)[:, None] + np.arange(m)[None, :]


def _lagged(ctx):
    """(h+1, m, d_y) stack: entry [s, k] is y^nat_{t-s-k}."""
    return ctx.ynat_window[_lag_index(ctx.m, ctx.h)]


def _point(P, ctx, lagged):
    M = _blocks(P, ctx)
    us = np.einsum("kij,skj->si", M, lagged)
    y = ctx.ynat_window[0]
    if ctx.h:
        y = y + np.einsum("sij,sj->i", ctx.markov_ops, us[1:])
    return np.concatenate([y, us[0]])


def memoryless_point(P, ctx: LossContext):
    """z = [y~_t; u_t] with every window entry pinned to P."""
    return _point(P, ctx, _lagged(ctx))


def memoryless_f(P, ctx: LossContext) -> float:
    """f_t(P) = F_t(P, P, ..., P)."""
    return ctx.loss.value(memoryless_point(P, ctx))


def _chain_rule(g, ctx, lagged):
    # V[s] is the cotangent reaching u_{t-s}; grad M^[k] = sum_s outer(V[s], y^nat_{t-s-k})
    gy, gu = g[: ctx.dy], g[ctx.dy :]
    V = np.empty((ctx.h + 1, ctx.du))
    V[0] = gu
    if ctx.h:
        V[1:] = np.einsum("sij,i->sj", ctx.markov_ops, gy)
    return np.einsum("si,skj->kij", V, lagged).reshape(-1)


def memoryless_gradient(P, ctx: LossContext, fd=False) -> np.ndarray:
    """Gradient of f_t at P.

    Uses the chain rule through the affine map P -> z whenever the loss
    exposes a gradient, and central differences otherwise (or if ``fd``).
    """
    P = np.asarray(P, dtype=float).reshape(-1)
    if fd or not _has_grad(ctx.loss):
        return finite_difference_gradient(lambda q: memoryless_f(q, ctx), P)
    lagged = _lagged(ctx)
    return _chain_rule(ctx.loss.grad(_point(P, ctx, lagged)), ctx, lagged)


def memoryless_value_and_gradient(P, ctx: LossContext):
    """(f_t(P), grad f_t(P)) sharing one evaluation of the affine point."""
    P = np.asarray(P, dtype=float).reshape(-1)
    lagged = _lagged(ctx)
    z = _point(P, ctx, lagged)
    value = ctx.loss.value(z)
    if not _has_grad(ctx.loss):
        return value, finite_difference_gradient(lambda q: memoryless_f(q, ctx), P)
    return value, _chain_rule(ctx.loss.grad(z), ctx, lagged)


def _has_grad(loss):
    try:
        return type(loss).grad is not LossSpec.grad
    except AttributeError:
        return False


def finite_difference_gradient(fun, P, rel_step=1e-5):
    """Central differences with step rel_step * max(1, ||P||)."""
    P = np.asarray(P, dtype=float)
    h = rel_step * max(1.0, float(np.linalg.norm(P)))
    grad = np.empty_like(P)
    for i in range(P.size):
        e = np.zeros_like(P)
        e[i] = h
        grad[i] = (fun(P + e) - fun(P - e)) / (2.0 * h)
    return grad


def expected_gradient(P, ctx: LossContext, windows) -> np.ndarray:
    """Monte-Carlo estimate of grad E[f_t]: average over fresh y^nat windows."""
    grads = [memoryless_gradient(P, ctx.with_window(w)) for w in windows]
    return np.mean(grads, axis=0)
