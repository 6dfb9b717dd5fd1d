"""Generalized stochastic ADMM iteration and residual diagnostics.

One step maps ``(x_k, z_k, u_k)`` to ``(x_{k+1}, z_{k+1}, u_{k+1})``:

* ``x`` minimises the subproblem objective

  .. math::

     (1-\\omega_1) f(x,\\xi) + \\omega_1 f'(x_k,\\xi)^T(x-x_k)
     + (1-\\omega)\\frac{\\rho}{2}\\|Ax - z_k + u_k\\|^2
     + \\omega\\rho (Ax_k - z_k + u_k)^T A (x-x_k)
     + \\frac{\\tau}{2}\\|x-x_k\\|^2

* ``z = prox_{g/rho}(alpha A x_{k+1} + (1-alpha) z_k + u_k)``
* ``u`` accumulates the relaxed residual.

``(omega1, omega, tau) = (0, 0, 0)`` is plain stochastic ADMM,
``(0, 1, c rho)`` the linearized variant and ``(1, 1, c rho)`` the
gradient-based one. States are stored batched, shape ``(n, d)``.
"""

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np


class NewtonError(RuntimeError):
    """The inner Newton solve for the x-subproblem did not converge."""


class SingularSubproblem(np.linalg.LinAlgError):
    """The x-subproblem has no coercive term (tau = 0, omega = 1, omega1 = 1)."""


def _callable_name(obj):
    return getattr(obj, "__name__", None) or repr(obj)


@dataclass
class SolverConfig:
    """Parameters of a G-sADMM run.

    ``epsilon`` and ``tau`` are derived (``1/rho`` and ``c rho``). ``batch``
    is either an integer or a callable ``k -> B_k`` (``k`` counts from 1);
    ``c_schedule`` optionally replaces ``c`` by ``c(t)`` evaluated at
    ``t = k epsilon``. ``z0`` and ``u0`` default to ``A x0`` and
    ``epsilon * g'(z0)``.
    """

    rho: float
    x0: object
    alpha: float = 1.0
    omega: float = 1.0
    omega1: float = 1.0
    c: float = 1.0
    T: float = 0.5
    z0: object = None
    u0: object = None
    batch: object = 1
    c_schedule: object = None
    newton_tol: float = 1e-11
    newton_maxiter: int = 100
    diverge_at: float = 1e8
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.c < 0:
            raise ValueError("c must be nonnegative")
        self.x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if self.steps < 1:
            raise ValueError("floor(rho*T) must be >= 1")

    @classmethod
    def from_m(cls, m, T, **kw):
        """Config with ``rho = 2^m / T`` (``epsilon = T 2^-m``)."""
        return cls(rho=2.0 ** m / T, T=T, **kw)

    @property
    def epsilon(self):
        return 1.0 / self.rho

    @property
    def tau(self):
        return self.c * self.rho

    @property
    def steps(self):
        # rho*T is an integer in exact arithmetic for the m-grid configs
        return int(math.floor(self.rho * self.T + 1e-9))

    @property
    def extrapolated(self):
        """True when omega/omega1 lie strictly inside (0, 1)."""
        return any(0.0 < w < 1.0 for w in (self.omega, self.omega1))

    def tau_at(self, k):
        if self.c_schedule is None:
            return self.tau
        return self.c_schedule(k * self.epsilon) * self.rho

    def batch_at(self, k):
        B = self.batch(k) if callable(self.batch) else self.batch
        B = int(B)
        if B < 1:
            raise ValueError("batch size must be >= 1")
        return B

    def batch_sizes(self):
        return np.array([self.batch_at(k) for k in range(1, self.steps + 1)], dtype=int)

    def initial_state(self, problem):
        x0 = self.x0.reshape(problem.d)
        z0 = problem.A @ x0 if self.z0 is None else np.asarray(self.z0, dtype=float).reshape(problem.m)
        if self.u0 is None:
            u0 = self.epsilon * problem.g.grad(z0)
        else:
            u0 = np.asarray(self.u0, dtype=float).reshape(problem.m)
        return SolverState(0, x0.copy(), z0.copy(), u0.copy())

    def as_dict(self):
        out = {}
        for key in ("rho", "alpha", "omega", "omega1", "c", "T", "newton_tol",
                    "newton_maxiter", "diverge_at"):
            out[key] = getattr(self, key)
        for key in ("x0", "z0", "u0"):
            val = getattr(self, key)
            out[key] = None if val is None else np.asarray(val, dtype=float).ravel().tolist()
        out["batch"] = self.batch if not callable(self.batch) else _callable_name(self.batch)
        out["c_schedule"] = None if self.c_schedule is None else _callable_name(self.c_schedule)
        out["meta"] = self.meta
        return out

    def fingerprint(self):
        blob = json.dumps(self.as_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class SolverState:
    """Iterate ``(x_k, z_k, u_k)``; arrays are ``(d,)`` or batched ``(n, d)``."""

    k: int
    x: np.ndarray
    z: np.ndarray
    u: np.ndarray


# ----------------------------------------------------------------- updates

def _solve(K, rhs):
    """Solve ``K delta = rhs`` row-wise; ``K`` is ``(d, d)`` or ``(n, d, d)``."""
    if K.ndim == 2:
        if K.shape[0] == 1:
            return rhs / K[0, 0]
        return np.linalg.solve(K, rhs.T).T
    if K.shape[-1] == 1:
        return rhs / K[:, 0, :]
    return np.linalg.solve(K, rhs[..., None])[..., 0]


def _coupling_matrix(problem, config, k):
    tau = config.tau_at(k)
    AtA = problem.A.T @ problem.A
    return tau * np.eye(problem.d) + (1.0 - config.omega) * config.rho * AtA


def _x_update(problem, x, z, u, noise, config, k, failed=None):
    A, rho, w1 = problem.A, config.rho, config.omega1
    K = _coupling_matrix(problem, config, k)
    base = rho * ((x @ A.T - z + u) @ A)
    if w1 > 0:
        base = base + w1 * problem.stoch_grad(x, noise)

    if w1 == 1.0:
        if np.linalg.cond(K) > 1e14:
            raise SingularSubproblem(
                "x-subproblem matrix tau*I + (1-omega)*rho*A^T A is singular")
        return x - _solve(K, base)

    # (1 - omega1) f'(x + delta) + base + K delta = 0, strictly convex in delta
    delta = np.zeros_like(x)
    scale = 1.0 - w1

    def residual(dlt):
        return scale * problem.stoch_grad(x + dlt, noise) + base + dlt @ K

    F = residual(delta)
    done = tiny = np.zeros(x.shape[0], dtype=bool)
    for _ in range(config.newton_maxiter):
        fnorm = np.linalg.norm(F, axis=1)
        xnorm = np.linalg.norm(x + delta, axis=1)
        done = fnorm <= config.newton_tol * (1.0 + xnorm)
        if np.all(done):
            return x + delta
        J = scale * problem.stoch_hess(x + delta, noise) + K
        step = -_solve(J, F)
        step[done] = 0.0
        if problem.quadratic:
            delta = delta + step
            F = residual(delta)
            continue
        t = np.ones(x.shape[0])
        for _ in range(30):
            trial = delta + t[:, None] * step
            Ft = residual(trial)
            bad = np.linalg.norm(Ft, axis=1) > fnorm
            bad &= ~done
            if not np.any(bad):
                break
            t = np.where(bad, 0.5 * t, t)
        tiny = np.linalg.norm(t[:, None] * step, axis=1) <= 1e-15 * (1.0 + xnorm)
        delta, F = trial, Ft
        # stagnation at rounding level counts as converged
        if np.all(done | tiny):
            return x + delta
    if failed is not None:
        failed |= ~(done | tiny)
        return x + delta
    raise NewtonError(f"x-subproblem Newton did not converge in {config.newton_maxiter} iterations")


def _z_update(g, A, x_new, z, u, config):
    a = config.alpha
    w = a * (x_new @ A.T) + (1.0 - a) * z + u
    return g.prox(w, config.epsilon)


def _relaxed_residual(A, x_new, z, z_new, alpha):
    return alpha * (x_new @ A.T) + (1.0 - alpha) * z - z_new


def _batched(state):
    single = np.ndim(state.x) == 1
    if single:
        return single, state.x[None], state.z[None], state.u[None]
    return single, state.x, state.z, state.u


def x_update(problem, state, noise_batch, config):
    """Minimise the x-subproblem; ``noise_batch`` is ``(B, p)`` or ``(n, B, p)``."""
    single, x, z, u = _batched(state)
    noise = np.asarray(noise_batch, dtype=float)
    if single:
        noise = noise.reshape(1, -1, problem.noise_width)
    out = _x_update(problem, x, z, u, noise, config, state.k + 1)
    return out[0] if single else out


def z_update(regularizer, x_new, state, config, A):
    single, _, z, u = _batched(state)
    out = _z_update(regularizer, np.asarray(A, dtype=float),
                    np.atleast_2d(x_new), z, u, config)
    return out[0] if single else out


def u_update(x_new, z_new, state, config, A):
    single, _, z, u = _batched(state)
    x_new, z_new = np.atleast_2d(x_new), np.atleast_2d(z_new)
    out = u + _relaxed_residual(np.asarray(A, dtype=float), x_new, z, z_new, config.alpha)
    return out[0] if single else out


def _advance(problem, x, z, u, noise, config, k, failed=None):
    x_new = _x_update(problem, x, z, u, noise, config, k, failed)
    z_new = _z_update(problem.g, problem.A, x_new, z, u, config)
    u_new = u + _relaxed_residual(problem.A, x_new, z, z_new, config.alpha)
    return x_new, z_new, u_new


def step(problem, state, rng, config):
    """Draw ``B_{k+1}`` samples from ``rng`` and apply the x, z, u updates."""
    single, x, z, u = _batched(state)
    k = state.k + 1
    noise = problem.sample_noise(rng, (x.shape[0], config.batch_at(k)))
    x, z, u = _advance(problem, x, z, u, noise, config, k)
    if single:
        x, z, u = x[0], z[0], u[0]
    return SolverState(k, x, z, u)


# ------------------------------------------------------------- trajectories

@dataclass
class Trajectory:
    """Per-step record of one run. ``ras[0]`` is defined as 0."""

    fingerprint: str
    seed: int
    xs: np.ndarray
    zs: np.ndarray
    us: np.ndarray
    rs: np.ndarray
    ras: np.ndarray
    test_values: np.ndarray = None
    epsilon: float = 1.0
    diverged: bool = False

    @property
    def status(self):
        return "diverged" if self.diverged else "ok"

    @property
    def ts(self):
        return self.epsilon * np.arange(len(self.xs))


def draw_noise(problem, seeds, total):
    """Per-run noise streams, stacked to ``(n, total, p)``.

    Each run draws from its own generator so a run's path depends only on
    its seed, never on how runs are grouped.
    """
    return np.stack([problem.sample_noise(np.random.default_rng(int(s)), (total,))
                     for s in seeds])


def simulate_batch(problem, config, seeds):
    """Run one trajectory per seed, vectorised over the batch.

    Returns ``(xs, zs, us, diverged, diverged_at)`` with ``xs`` of shape
    ``(steps+1, n, d)``. Diverged runs are frozen and filled with NaN from
    the step at which ``|x| > diverge_at`` or the inner Newton solve fails
    (a blowing-up quartic loss defeats the subproblem tolerance first).
    """
    n, S = len(seeds), config.steps
    sizes = config.batch_sizes()
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    noise = draw_noise(problem, seeds, int(offsets[-1]))

    s0 = config.initial_state(problem)
    x = np.tile(s0.x, (n, 1))
    z = np.tile(s0.z, (n, 1))
    u = np.tile(s0.u, (n, 1))
    xs = np.full((S + 1, n, problem.d), np.nan)
    zs = np.full((S + 1, n, problem.m), np.nan)
    us = np.full((S + 1, n, problem.m), np.nan)
    xs[0], zs[0], us[0] = x, z, u
    diverged = np.zeros(n, dtype=bool)
    diverged_at = np.full(n, -1)

    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(1, S + 1):
            chunk = noise[:, offsets[k - 1]:offsets[k]]
            failed = np.zeros(n, dtype=bool)
            x, z, u = _advance(problem, x, z, u, chunk, config, k, failed)
            bad = ~np.isfinite(x).all(axis=1) | (np.linalg.norm(x, axis=1) > config.diverge_at)
            bad |= failed
            new = bad & ~diverged
            if np.any(new):
                diverged |= new
                diverged_at[new] = k
            if np.any(diverged):
                x[diverged] = 0.0
                z[diverged] = 0.0
                u[diverged] = 0.0
            live = ~diverged
            xs[k, live], zs[k, live], us[k, live] = x[live], z[live], u[live]
            if not np.any(live):
                break
    return xs, zs, us, diverged, diverged_at


def run_trajectory(problem, config, seed, test_fn=None):
    """Run ``floor(rho T)`` steps from the configured initial state.

    A run whose ``|x_k|`` exceeds ``config.diverge_at`` stops there and is
    returned truncated with ``diverged=True``.
    """
    xs, zs, us, diverged, at = simulate_batch(problem, config, [seed])
    n_rec = at[0] if diverged[0] else config.steps + 1
    xs, zs, us = xs[:n_rec, 0], zs[:n_rec, 0], us[:n_rec, 0]
    rs, ras, _ = residuals(problem.A, xs, zs, config.alpha)
    phi = None if test_fn is None else np.asarray(test_fn(xs))
    return Trajectory(config.fingerprint(), int(seed), xs, zs, us, rs, ras, phi,
                      config.epsilon, bool(diverged[0]))


def residuals(A, xs, zs, alpha):
    """``r_k``, ``r^alpha_k`` and the modified ``rhat^alpha_k``.

    ``xs`` has the step index on axis 0 (any batch axes after it). Entries at
    ``k = 0`` of the two relaxed residuals are set to zero.
    """
    Ax = xs @ A.T
    rs = Ax - zs
    ras = np.zeros_like(rs)
    rhat = np.zeros_like(rs)
    ras[1:] = alpha * Ax[1:] + (1.0 - alpha) * zs[:-1] - zs[1:]
    rhat[1:] = alpha * rs[:-1] + (alpha - 1.0) * (zs[1:] - zs[:-1])
    return rs, ras, rhat


def residual_series(trajectory, A, alpha):
    """Return ``(r_k, r^alpha_k, rhat^alpha_k)`` for a stored trajectory."""
    return residuals(np.asarray(A, dtype=float), trajectory.xs, trajectory.zs, alpha)
