"""Stochastic modified equation of G-sADMM.

The iterates are weakly approximated by

    Mhat dX = -grad V(X) dt + sqrt(epsilon / B_t) sigma(X) dW,
    Mhat = c I + (1/alpha - omega) A^T A,

integrated here with Euler-Maruyama on a grid finer than the ADMM one.
"""

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .solver import _callable_name


class IndefiniteMhat(np.linalg.LinAlgError):
    """Mhat is not positive definite, so the SME is ill-posed."""


class NotPSD(ValueError):
    pass


@dataclass(frozen=True)
class Mhat:
    matrix: np.ndarray
    min_eigenvalue: float
    positive_definite: bool


def m_hat(config, A):
    """``c I + (1/alpha - omega) A^T A`` with its smallest eigenvalue."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    M = config.c * np.eye(A.shape[1]) + (1.0 / config.alpha - config.omega) * (A.T @ A)
    M = 0.5 * (M + M.T)
    lam = float(np.linalg.eigvalsh(M)[0])
    return Mhat(M, lam, lam > 0)


def psd_sqrt(Sigma, tol=1e-10):
    """Symmetric square root ``S`` with ``S S^T = Sigma``.

    Accepts ``(d, d)`` or a stack ``(n, d, d)``. Eigenvalues in
    ``[-tol * lambda_max, 0)`` are clamped to zero; anything more negative
    raises :class:`NotPSD`.
    """
    S = np.asarray(Sigma, dtype=float)
    if S.shape[-1] == 1:
        lam = S[..., 0, 0]
        if np.any(lam < -tol * np.maximum(np.abs(lam), 1e-300)):
            raise NotPSD("negative variance")
        return np.sqrt(np.maximum(lam, 0.0))[..., None, None]
    lam, V = np.linalg.eigh(0.5 * (S + np.swapaxes(S, -1, -2)))
    top = np.max(np.abs(lam), axis=-1, keepdims=True)
    if np.any(lam < -tol * top):
        raise NotPSD(f"matrix has eigenvalue {lam.min():.3e} below -{tol} * lambda_max")
    root = np.sqrt(np.maximum(lam, 0.0))
    return (V * root[..., None, :]) @ np.swapaxes(V, -1, -2)


@dataclass
class SmeConfig:
    """Euler-Maruyama settings for the SME.

    ``dt`` is the recording grid (defaults to ``epsilon``, matching the ADMM
    grid ``t_k = k epsilon``); each grid interval is split into
    ``em_substeps`` integration steps. ``sigma_mode`` is ``"exact"`` or
    ``"sampled"`` (``sigma_N`` fresh samples per step). ``batch``,
    ``mhat_scale`` and ``step_scale`` may be callables of ``t``.
    """

    epsilon: float
    mhat: np.ndarray
    T: float
    X0: object
    dt: float = None
    em_substeps: int = 4
    sigma_mode: str = "exact"
    sigma_N: int = 9
    batch: object = 1
    mhat_scale: object = None
    step_scale: object = None
    diverge_at: float = 1e8
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        M = np.atleast_2d(np.asarray(self.mhat, dtype=float))
        if np.max(np.abs(M - M.T)) > 1e-12:
            raise ValueError("mhat must be symmetric")
        self.mhat = M
        lam = np.linalg.eigvalsh(M)
        self.positive_definite = bool(lam[0] > 0)
        self._mhat_inv = np.linalg.inv(M) if self.positive_definite else None
        if self.dt is None:
            self.dt = self.epsilon
        if self.em_substeps < 1:
            raise ValueError("em_substeps must be >= 1")
        if self.sigma_mode not in ("exact", "sampled"):
            raise ValueError("sigma_mode must be 'exact' or 'sampled'")
        self.X0 = np.atleast_1d(np.asarray(self.X0, dtype=float))

    @classmethod
    def from_solver(cls, solver_config, problem, **kw):
        """SME matching a G-sADMM config: same epsilon, T, start and batch."""
        mh = m_hat(solver_config, problem.A)
        kw.setdefault("batch", solver_config.batch if not callable(solver_config.batch) else 1)
        return cls(solver_config.epsilon, mh.matrix, solver_config.T,
                   solver_config.x0.copy(), **kw)

    @property
    def steps(self):
        return int(math.floor(self.T / self.dt + 1e-9))

    @property
    def h(self):
        return self.dt / self.em_substeps

    def mhat_inv(self):
        if self._mhat_inv is None:
            raise IndefiniteMhat("Mhat is not positive definite; SME integration refused")
        return self._mhat_inv

    def batch_at(self, t):
        return float(self.batch(t)) if callable(self.batch) else float(self.batch)

    def as_dict(self):
        out = {k: getattr(self, k) for k in ("epsilon", "T", "dt", "em_substeps",
                                               "sigma_mode", "sigma_N", "diverge_at")}
        out["mhat"] = self.mhat.tolist()
        out["X0"] = self.X0.tolist()
        for key in ("batch", "mhat_scale", "step_scale"):
            val = getattr(self, key)
            out[key] = _callable_name(val) if callable(val) else val
        out["meta"] = self.meta
        return out

    def fingerprint(self):
        blob = json.dumps(self.as_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ContinuousTrajectory:
    ts: np.ndarray
    Xs: np.ndarray
    seed: object = None
    fingerprint: str = ""
    diverged: bool = False


def _sigma(problem, X, config, sigma_noise):
    if config.sigma_mode == "exact":
        Sig = problem.sigma_exact(X)
    else:
        Sig = problem.sigma_from_noise(X, sigma_noise)
    return psd_sqrt(Sig)


def _increment(problem, X, config, eta, sigma_noise, t):
    """``Mhat_t^{-1} (-grad V dt + sqrt(eps dt / B) sigma eta)`` for step ``h``."""
    h = config.h
    drift = -problem.potential_grad(X) * h
    amp = math.sqrt(config.epsilon * h / config.batch_at(t))
    noise = amp * np.einsum("nij,nj->ni", _sigma(problem, X, config, sigma_noise), eta)
    inc = drift + noise
    if config.step_scale is not None:
        inc = config.step_scale(t) * inc
    inc = inc @ config.mhat_inv().T
    if config.mhat_scale is not None:
        inc = inc / config.mhat_scale(t)
    return inc


def em_step(problem, X, config, rng, t=0.0):
    """One Euler-Maruyama step of size ``config.h`` from ``X`` (``(d,)`` or ``(n, d)``).

    For l1 regularisers the drift uses ``sign`` with ``sign(0) = 0``.
    """
    single = np.ndim(X) == 1
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    eta = rng.standard_normal((n, problem.d))
    sig_noise = None
    if config.sigma_mode == "sampled":
        sig_noise = problem.sample_noise(rng, (n, config.sigma_N))
    out = X + _increment(problem, X, config, eta, sig_noise, t)
    return out[0] if single else out


def _draw(problem, config, seeds, total):
    etas, sig = [], []
    for s in seeds:
        rng = np.random.default_rng(int(s))
        etas.append(rng.standard_normal((total, problem.d)))
        if config.sigma_mode == "sampled":
            sig.append(problem.sample_noise(rng, (total, config.sigma_N)))
    return np.stack(etas), (np.stack(sig) if sig else None)


def simulate_batch(problem, config, seeds):
    """Integrate one SME path per seed; returns ``(Xs, diverged, diverged_at)``.

    ``Xs`` has shape ``(steps+1, n, d)`` and holds X at the grid ``k dt``.
    """
    minv = config.mhat_inv()  # refuse indefinite Mhat before drawing noise
    del minv
    n, S, sub = len(seeds), config.steps, config.em_substeps
    eta, sig_noise = _draw(problem, config, seeds, S * sub)
    X = np.tile(config.X0.reshape(problem.d), (n, 1))
    Xs = np.full((S + 1, n, problem.d), np.nan)
    Xs[0] = X
    diverged = np.zeros(n, dtype=bool)
    diverged_at = np.full(n, -1)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(S):
            for j in range(sub):
                idx = k * sub + j
                t = idx * config.h
                sn = None if sig_noise is None else sig_noise[:, idx]
                X = X + _increment(problem, X, config, eta[:, idx], sn, t)
                bad = ~np.isfinite(X).all(axis=1) | (np.linalg.norm(X, axis=1) > config.diverge_at)
                new = bad & ~diverged
                if np.any(new):
                    diverged |= new
                    diverged_at[new] = k + 1
                    X[diverged] = 0.0
            live = ~diverged
            Xs[k + 1, live] = X[live]
            if not np.any(live):
                break
    return Xs, diverged, diverged_at


def run_sme(problem, config, seed):
    """Integrate from ``X0`` to ``T``; records X at ``t_k = k dt``."""
    Xs, div, at = simulate_batch(problem, config, [seed])
    n_rec = at[0] if div[0] else config.steps + 1
    Xs = Xs[:n_rec, 0]
    return ContinuousTrajectory(config.dt * np.arange(n_rec), Xs, int(seed),
                                config.fingerprint(), bool(div[0]))


def gradient_flow_reference(problem, mhat, X0, T, dt, refine=16, max_step=2.0 ** -10):
    """Solve ``Mhat X' = -grad V(X)`` by classic RK4.

    The inner step is ``dt/refine``, further subdivided so it never exceeds
    ``max_step``. Returns the solution sampled on the grid ``k dt``.
    """
    M = np.atleast_2d(np.asarray(mhat, dtype=float))
    if np.linalg.eigvalsh(0.5 * (M + M.T))[0] <= 0:
        raise IndefiniteMhat("Mhat is not positive definite")
    Minv = np.linalg.inv(M)
    S = int(math.floor(T / dt + 1e-9))
    refine = max(int(refine), int(math.ceil(dt / max_step - 1e-9)))
    h = dt / refine

    def rhs(X):
        return -problem.potential_grad(X) @ Minv.T

    X = np.atleast_1d(np.asarray(X0, dtype=float)).reshape(1, problem.d)
    out = np.empty((S + 1, problem.d))
    out[0] = X[0]
    for k in range(S):
        for _ in range(refine):
            k1 = rhs(X)
            k2 = rhs(X + 0.5 * h * k1)
            k3 = rhs(X + 0.5 * h * k2)
            k4 = rhs(X + h * k3)
            X = X + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[k + 1] = X[0]
    return ContinuousTrajectory(dt * np.arange(S + 1), out)
