"""Known stable LTI plant with bounded i.i.d. noise.

    x_{t+1} = A x_t + B u_t + w_t
    y_t     = C x_t + e_t

The episode starts from x_0 = 0 with u_0 = 0, so x_1 = w_0 and the natural
output is y^nat_t = e_t + sum_{s=0}^{t-1} C A^{t-s-1} w_s.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

NOISE_KINDS = ("uniform-ball", "truncated-gaussian")
TRUNCATION_SIGMAS = 4.0
STABILITY_MARGIN = 1e-10
PSI_RTOL = 1e-12
MAX_MEMORY = 10_000


class UnstableSystemError(ValueError):
    pass


def _truncated_normal_variance(c):
    # variance of N(0, 1) conditioned on |z| <= c
    phi = math.exp(-0.5 * c * c) / math.sqrt(2.0 * math.pi)
    mass = math.erf(c / math.sqrt(2.0))
    return 1.0 - 2.0 * c * phi / mass


@dataclass(frozen=True)
class BoundedNoiseSpec:
    """Zero-mean bounded i.i.d. noise.

    ``scale`` is the ball radius for ``uniform-ball`` and the per-coordinate
    standard deviation (before truncation at 4 sigma) for
    ``truncated-gaussian``.
    """

    kind: str
    dim: int
    scale: float

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}; expected one of {NOISE_KINDS}")
        if self.dim < 1:
            raise ValueError("noise dimension must be positive")
        if self.scale < 0:
            raise ValueError("noise scale must be nonnegative")

    @classmethod
    def uniform_ball(cls, dim, bound):
        return cls("uniform-ball", int(dim), float(bound))

    @classmethod
    def truncated_gaussian(cls, dim, std):
        return cls("truncated-gaussian", int(dim), float(std))

    @property
    def bound(self):
        """Maximum Euclidean norm of any sample."""
        if self.kind == "uniform-ball":
            return self.scale
        return TRUNCATION_SIGMAS * self.scale * math.sqrt(self.dim)

    @property
    def variance_floor(self):
        """Exact per-coordinate second moment, the sigma^2 used by the curvature transfer."""
        if self.kind == "uniform-ball":
            return self.scale**2 / (self.dim + 2)
        return self.scale**2 * _truncated_normal_variance(TRUNCATION_SIGMAS)

    def sample(self, rng, n):
        """Draw ``n`` samples as an (n, dim) array."""
        d = self.dim
        if self.scale == 0.0:
            return np.zeros((n, d))
        if self.kind == "uniform-ball":
            g = rng.standard_normal((n, d))
            norms = np.linalg.norm(g, axis=1, keepdims=True)
            norms[norms == 0.0] = 1.0
            radii = self.scale * rng.random((n, 1)) ** (1.0 / d)
            return g / norms * radii
        z = rng.standard_normal((n, d))
        bad = np.abs(z) > TRUNCATION_SIGMAS
        while bad.any():
            z[bad] = rng.standard_normal(int(bad.sum()))
            bad = np.abs(z) > TRUNCATION_SIGMAS
        return self.scale * z


@dataclass(frozen=True)
class DecayBound:
    """Certified geometric envelope ||A^k||_2 <= coeff * rate**k."""

    coeff: float
    rate: float
    nilpotent_index: int | None  # k with A^k = 0, when the envelope rate is 0

    def power_bound(self, k):
        if self.nilpotent_index is not None:
            return self.coeff if k < self.nilpotent_index else 0.0
        return self.coeff * self.rate**k

    def series_tail(self, k):
        """Upper bound on sum_{j>=k} ||A^j||_2."""
        if self.nilpotent_index is not None:
            return float(sum(self.power_bound(j) for j in range(k, max(k, self.nilpotent_index))))
        return self.coeff * self.rate**k / (1.0 - self.rate)


def _decay_bound(A):
    n = A.shape[0]
    power = np.eye(n)
    norms = [1.0]
    # smallest k0 with ||A^k0|| <= 1/2; exists because rho(A) < 1
    for k0 in range(1, 100_000):
        power = power @ A
        q = np.linalg.norm(power, 2)
        if q <= 0.5:
            break
        norms.append(q)
    else:  # pragma: no cover - guarded by the spectral radius check
        raise UnstableSystemError("could not certify decay of A^k")
    if q == 0.0:
        return DecayBound(coeff=max(norms), rate=0.0, nilpotent_index=k0)
    rate = q ** (1.0 / k0)
    coeff = max(nk / rate**r for r, nk in enumerate(norms))
    return DecayBound(coeff=coeff, rate=rate, nilpotent_index=None)


@dataclass(frozen=True, eq=False)
class SystemModel:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    noise_w: BoundedNoiseSpec
    noise_e: BoundedNoiseSpec
    _psi: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        C = np.asarray(self.C, dtype=float)
        if B.ndim == 1:
            B = B.reshape(-1, 1)
        C = np.atleast_2d(C)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        for arr in (A, B, C):
            arr.setflags(write=False)
        dx = A.shape[0]
        if A.shape != (dx, dx):
            raise ValueError(f"A must be square, got {A.shape}")
        if B.shape[0] != dx:
            raise ValueError(f"B has {B.shape[0]} rows, expected {dx}")
        if C.shape[1] != dx:
            raise ValueError(f"C has {C.shape[1]} columns, expected {dx}")
        if self.noise_w.dim != dx:
            raise ValueError(f"process noise dimension {self.noise_w.dim} != d_x={dx}")
        if self.noise_e.dim != C.shape[0]:
            raise ValueError(f"output noise dimension {self.noise_e.dim} != d_y={C.shape[0]}")
        rho = spectral_radius(A)
        if rho >= 1.0 - STABILITY_MARGIN:
            raise UnstableSystemError(f"spectral radius {rho:.12g} is not below 1")
        object.__setattr__(self, "_decay", _decay_bound(A))

    @property
    def dx(self):
        return self.A.shape[0]

    @property
    def du(self):
        return self.B.shape[1]

    @property
    def dy(self):
        return self.C.shape[0]

    @property
    def decay(self) -> DecayBound:
        return self._decay

    def markov(self, s):
        return markov_operator(self, s)

    def markov_stack(self, h):
        """G^[1..h] stacked as an (h, d_y, d_u) array."""
        if h == 0:
            return np.zeros((0, self.dy, self.du))
        return np.stack([markov_operator(self, s) for s in range(1, h + 1)])

    @property
    def psi_envelope(self):
        """(c, rho_hat) with psi(i) <= c * rho_hat**i for every i >= 1."""
        d = self.decay
        cb = np.linalg.norm(self.C, 2) * np.linalg.norm(self.B, 2)
        if d.rate == 0.0:
            # nilpotent: any positive rate works once c covers the finitely many terms
            rate = 0.5
            k = d.nilpotent_index
            coeff = max((psi(self, i) / rate**i for i in range(1, k + 2)), default=0.0)
            return coeff, rate
        return cb * d.coeff / (d.rate * (1.0 - d.rate)), d.rate

    @property
    def r_g(self):
        """R_{G*} = 1 + psi(1)."""
        return 1.0 + psi(self, 1)

    @property
    def r_nat(self):
        """Bound on ||y^nat_t||: bound_e + bound_w * sum_{j>=0} ||C A^j||."""
        return self.noise_e.bound + self.noise_w.bound * _output_gain_sum(self)

    def sigma_min_C(self):
        return float(np.linalg.svd(self.C, compute_uv=False).min())


def spectral_radius(A):
    A = np.atleast_2d(A)
    return float(np.max(np.abs(np.linalg.eigvals(A)))) if A.size else 0.0


def _input_powers(model: SystemModel, n: int) -> np.ndarray:
    """Stack (A^k B)_{k < n'} with n' >= n, grown by doubling and cached."""
    P = model._psi.get("AkB")
    if P is None:
        P = model.B[None].copy()
    while P.shape[0] < n:
        # A^{k+r} B = A^r (A^k B): one batched product doubles the stack
        Ar = np.linalg.matrix_power(model.A, P.shape[0])
        P = np.concatenate([P, np.einsum("ij,kjl->kil", Ar, P)])
    model._psi["AkB"] = P
    return P


def markov_operator(model: SystemModel, s: int) -> np.ndarray:
    """G^[s] = C A^{s-1} B, cached on the model."""
    if s < 1:
        raise ValueError(f"Markov operator index must be >= 1, got {s}")
    return model.C @ _input_powers(model, s)[s - 1]


def _output_gain_sum(model):
    # sum_{j>=0} ||C A^j||_2 with the same relative tail rule as psi
    d = model.decay
    cnorm = np.linalg.norm(model.C, 2)
    total = 0.0
    power = np.eye(model.dx)
    for j in range(1_000_000):
        total += np.linalg.norm(model.C @ power, 2)
        tail = cnorm * d.series_tail(j + 1)
        if tail <= PSI_RTOL * total or tail == 0.0:
            return total + tail
        power = power @ model.A
    raise RuntimeError("output gain series did not converge")  # pragma: no cover


def _markov_norms(model: SystemModel, n: int) -> np.ndarray:
    """||G^[j]||_2 for j = 1..n' with n' >= n, cached on the model."""
    norms = model._psi.get("norms")
    if norms is None or norms.size < n:
        G = np.einsum("ij,kjl->kil", model.C, _input_powers(model, n))
        norms = np.linalg.norm(G, 2, axis=(1, 2))
        model._psi["norms"] = norms
    return norms


def _psi_table(model: SystemModel, k_max: int) -> np.ndarray:
    """psi(1..k_max) from one summation window.

    The window [k, N] is extended until the certified geometric remainder
    beyond N drops below 1e-12 of the smallest tail sum in the table; the
    remainder is then added, so every entry is an upper estimate.
    """
    table = model._psi.get("table")
    if table is not None and table.size >= k_max:
        return table
    d = model.decay
    cb = np.linalg.norm(model.C, 2) * np.linalg.norm(model.B, 2)
    n = max(2 * k_max, 64)
    while True:
        norms = _markov_norms(model, n)
        N = norms.size
        # remaining terms j > N use A^{j-1} with j-1 >= N
        tail = cb * d.series_tail(N)
        smallest = float(norms[k_max - 1 :].sum())
        if tail == 0.0 or tail <= PSI_RTOL * smallest or (smallest == 0.0 and tail < 1e-300):
            break
        if N > 10_000_000:  # pragma: no cover
            raise RuntimeError("psi series did not converge")
        n = 2 * N
    suffix = np.cumsum(norms[::-1])[::-1]
    table = suffix[: max(k_max, 1)] + tail
    model._psi["table"] = table
    return table


def psi(model: SystemModel, i: int) -> float:
    """Tail sum psi(i) = sum_{j>=i} ||C A^{j-1} B||_2.

    Summation stops once the certified geometric tail drops below 1e-12 of
    the partial sum; the bounded remainder is added so the value is an
    upper estimate.
    """
    if i < 1:
        raise ValueError("psi index must be >= 1")
    return float(_psi_table(model, i)[i - 1])


def select_memory(model: SystemModel, radius: float, T: int) -> tuple[int, int]:
    """Smallest (m, h) with psi(m) <= R_G*/T and psi(h) <= R_M/T."""
    if T < 1:
        raise ValueError("horizon T must be >= 1")
    if radius <= 0:
        raise ValueError("radius R_M must be positive")

    def first_below(threshold):
        # cheap lower bound on psi(MAX_MEMORY) before any convergent summation
        norms = _markov_norms(model, 2 * MAX_MEMORY)
        if norms[MAX_MEMORY - 1 :].sum() > threshold:
            raise ValueError(
                f"no memory length <= {MAX_MEMORY} brings psi below {threshold:.3g}; decay is too slow"
            )
        k_max = 64
        while True:
            table = _psi_table(model, min(k_max, MAX_MEMORY))
            hits = np.flatnonzero(table[: min(k_max, MAX_MEMORY)] <= threshold)
            if hits.size:
                return int(hits[0]) + 1
            if k_max >= MAX_MEMORY:
                raise ValueError(
                    f"no memory length <= {MAX_MEMORY} brings psi below {threshold:.3g}; decay is too slow"
                )
            k_max *= 4

    return first_below(model.r_g / T), first_below(radius / T)


@dataclass
class SimState:
    """Mutable simulation state; owned by a single episode."""

    model: SystemModel
    rng: np.random.Generator
    t: int
    x: np.ndarray
    input_history: list = field(default_factory=list)
    output_history: list = field(default_factory=list)
    w_log: list = field(default_factory=list)  # w_0, w_1, ...
    e_log: list = field(default_factory=list)  # e_1, e_2, ...
    _pending_y: np.ndarray | None = None

    @property
    def noise_log(self):
        return np.array(self.w_log).reshape(-1, self.model.dx), np.array(self.e_log).reshape(-1, self.model.dy)


def initial_state(model: SystemModel, rng, x1=None) -> SimState:
    """State at t = 1; by default x_1 = w_0 (zero initial condition)."""
    if isinstance(rng, (int, np.integer)) or rng is None:
        rng = np.random.default_rng(rng)
    if x1 is None:
        w0 = model.noise_w.sample(rng, 1)[0]
        return SimState(model, rng, 1, w0.copy(), w_log=[w0])
    x1 = np.asarray(x1, dtype=float).reshape(model.dx)
    # an explicit start is logged as w_0 so replay stays consistent
    return SimState(model, rng, 1, x1.copy(), w_log=[x1.copy()])


def observe(state: SimState) -> np.ndarray:
    """Emit y_t = C x_t + e_t (idempotent within a step)."""
    if state._pending_y is None:
        e = state.model.noise_e.sample(state.rng, 1)[0]
        state.e_log.append(e)
        y = state.model.C @ state.x + e
        state.output_history.append(y)
        state._pending_y = y
    return state._pending_y


def advance(state: SimState, u) -> SimState:
    """Apply u_t and move to x_{t+1} = A x_t + B u_t + w_t."""
    m = state.model
    u = np.asarray(u, dtype=float).reshape(-1)
    if u.shape != (m.du,):
        raise ValueError(f"input has dimension {u.shape[0]}, expected d_u={m.du}")
    if state._pending_y is None:
        observe(state)
    w = m.noise_w.sample(state.rng, 1)[0]
    state.w_log.append(w)
    state.input_history.append(u.copy())
    state.x = m.A @ state.x + m.B @ u + w
    state.t += 1
    state._pending_y = None
    return state


def step(state: SimState, u):
    """One full step: returns (state, y_t) with y_t emitted before u_t is applied."""
    y = observe(state)
    advance(state, u)
    return state, y


def replay_outputs(model: SystemModel, w_log, e_log, inputs):
    """Outputs y_1..y_n obtained by pushing logged noise and inputs through the plant."""
    w_log = np.asarray(w_log, dtype=float).reshape(-1, model.dx)
    e_log = np.asarray(e_log, dtype=float).reshape(-1, model.dy)
    inputs = np.asarray(inputs, dtype=float).reshape(-1, model.du)
    n = e_log.shape[0]
    x = w_log[0].copy()
    ys = np.empty((n, model.dy))
    for k in range(n):
        ys[k] = model.C @ x + e_log[k]
        if k < inputs.shape[0]:
            x = model.A @ x + model.B @ inputs[k] + w_log[k + 1]
    return ys


def natural_output(y_t, past_inputs, model: SystemModel) -> np.ndarray:
    """y^nat_t = y_t - sum_{s=1}^{t-1} G^[s] u_{t-s}; ``past_inputs`` is u_1..u_{t-1}."""
    y_t = np.asarray(y_t, dtype=float).reshape(-1)
    if y_t.shape != (model.dy,):
        raise ValueError(f"output has dimension {y_t.shape[0]}, expected d_y={model.dy}")
    past = np.asarray(past_inputs, dtype=float).reshape(-1, model.du)
    k = past.shape[0]
    if k == 0:
        return y_t.copy()
    G = model.markov_stack(k)  # G[s-1] pairs with u_{t-s} = past[k-s]
    return y_t - np.einsum("sij,sj->i", G, past[::-1])


def natural_outputs_from_noise(model: SystemModel, w_log, e_log):
    """Ground-truth y^nat_1..y^nat_n from the noise log alone."""
    w_log = np.asarray(w_log, dtype=float).reshape(-1, model.dx)
    e_log = np.asarray(e_log, dtype=float).reshape(-1, model.dy)
    n = e_log.shape[0]
    out = np.empty((n, model.dy))
    x = w_log[0].copy()
    for k in range(n):
        out[k] = model.C @ x + e_log[k]
        x = model.A @ x + w_log[k + 1] if k + 1 < w_log.shape[0] else model.A @ x
    return out


def sample_natural_windows(model: SystemModel, length, count, rng, burn_in=200):
    """Fresh y^nat windows (count, length, d_y), newest first, from independent noise."""
    total = burn_in + length
    w = model.noise_w.sample(rng, count * total).reshape(count, total, model.dx)
    e = model.noise_e.sample(rng, count * total).reshape(count, total, model.dy)
    x = np.zeros((count, model.dx))
    out = np.empty((count, total, model.dy))
    for k in range(total):
        x = x @ model.A.T + w[:, k]
        out[:, k] = x @ model.C.T + e[:, k]
    return out[:, ::-1][:, :length].copy()


def random_stable_system(dx, du, dy, rho, seed, noise_w=None, noise_e=None):
    """Random (A, B, C) with spectral radius exactly ``rho``."""
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((dx, dx))
    r = spectral_radius(A)
    A = A * (rho / r) if r > 0 else A
    B = rng.standard_normal((dx, du)) / math.sqrt(dx)
    C = rng.standard_normal((dy, dx)) / math.sqrt(dx)
    noise_w = noise_w or BoundedNoiseSpec.uniform_ball(dx, 1.0)
    noise_e = noise_e or BoundedNoiseSpec.uniform_ball(dy, 1.0)
    return SystemModel(A, B, C, noise_w, noise_e)


def scalar_system(a=0.5, b=1.0, c=1.0, w_bound=1.0, e_bound=1.0):
    return SystemModel(
        np.array([[a]]),
        np.array([[b]]),
        np.array([[c]]),
        BoundedNoiseSpec.uniform_ball(1, w_bound),
        BoundedNoiseSpec.uniform_ball(1, e_bound),
    )
