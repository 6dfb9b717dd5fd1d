"""Stochastic composite problems ``min E f(x, xi) + g(Ax)`` and their oracles.

All oracles are batched: a state ``x`` has shape ``(n, d)`` and a noise batch
has shape ``(n, B, p)`` where ``B`` is the mini-batch size and ``p`` the
width of one noise sample. Gradients and Hessians are averaged over ``B``.
"""

from dataclasses import dataclass, field

import numpy as np


class UnsupportedOperation(NotImplementedError):
    """Raised when an oracle is not available for a problem."""


class ProblemError(ValueError):
    """Raised for invalid problem definitions."""


def hilbert(n):
    """Hilbert matrix with entries ``1 / (i + j - 1)`` (1-based indices)."""
    i = np.arange(1, n + 1)
    return 1.0 / (i[:, None] + i[None, :] - 1.0)


def _as_batch(x, d):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x.reshape(1, d) if x.size == d else x.reshape(-1, 1)
    return x


# ---------------------------------------------------------------- regularizer

@dataclass(frozen=True)
class Regularizer:
    """The function ``g`` acting on ``z = Ax``.

    ``kind`` is one of ``quadratic`` (``beta/2 |z|^2``), ``l1``
    (``beta |z|_1``), ``zero`` or ``custom``. For ``custom`` the callables
    ``value_fn``, ``grad_fn`` and optionally ``prox_fn(w, t)`` and
    ``hess_fn`` (diagonal of the Hessian) are used.
    """

    kind: str = "zero"
    beta: float = 0.0
    value_fn: object = field(default=None, compare=False)
    grad_fn: object = field(default=None, compare=False)
    prox_fn: object = field(default=None, compare=False)
    hess_fn: object = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in ("quadratic", "l1", "zero", "custom"):
            raise ProblemError(f"unknown regularizer kind {self.kind!r}")
        if self.beta < 0:
            raise ProblemError("beta must be nonnegative")

    @property
    def smooth(self):
        return self.kind in ("quadratic", "zero") or (
            self.kind == "custom" and self.hess_fn is not None)

    def value(self, z):
        z = np.asarray(z, dtype=float)
        if self.kind == "quadratic":
            return 0.5 * self.beta * np.sum(z * z, axis=-1)
        if self.kind == "l1":
            return self.beta * np.sum(np.abs(z), axis=-1)
        if self.kind == "zero":
            return np.zeros(z.shape[:-1])
        return self.value_fn(z)

    def grad(self, z):
        """Gradient, or the subgradient ``beta * sign(z)`` with ``sign(0) = 0``."""
        z = np.asarray(z, dtype=float)
        if self.kind == "quadratic":
            return self.beta * z
        if self.kind == "l1":
            return self.beta * np.sign(z)
        if self.kind == "zero":
            return np.zeros_like(z)
        return self.grad_fn(z)

    def hess_diag(self, z):
        z = np.asarray(z, dtype=float)
        if self.kind == "quadratic":
            return np.full_like(z, self.beta)
        if self.kind in ("l1", "zero"):
            return np.zeros_like(z)
        if self.hess_fn is None:
            raise UnsupportedOperation("custom regularizer has no Hessian")
        return self.hess_fn(z)

    def prox(self, w, t):
        """``argmin_z g(z) + |w - z|^2 / (2 t)``."""
        if not np.all(np.asarray(t) > 0):
            raise ProblemError("prox scale t must be positive")
        w = np.asarray(w, dtype=float)
        if self.kind == "quadratic":
            return w / (1.0 + t * self.beta)
        if self.kind == "l1":
            return np.sign(w) * np.maximum(np.abs(w) - t * self.beta, 0.0)
        if self.kind == "zero":
            return w.copy()
        if self.prox_fn is None:
            raise UnsupportedOperation("custom regularizer has no prox")
        return self.prox_fn(w, t)


def g_prox(regularizer, w, t):
    return regularizer.prox(w, t)


# ------------------------------------------------------------------ problems

@dataclass(frozen=True)
class CovarianceEstimate:
    Sigma: np.ndarray
    source: str
    x_probe: np.ndarray


class StochasticProblem:
    """Base class for ``min E_xi f(x, xi) + g(Ax)``.

    Subclasses implement :meth:`sample_noise`, :meth:`stoch_grad` and, where
    available, the loss, Hessian and mean oracles.
    """

    name = "custom"
    noise_width = 1
    quadratic = False

    def __init__(self, A, g):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        s = np.linalg.svd(A, compute_uv=False)
        if A.shape[0] < A.shape[1] or s[-1] <= 1e-10 * s[0]:
            raise ProblemError("A must have full column rank")
        self.A = A
        self.A.setflags(write=False)
        self.g = g
        self.m, self.d = A.shape

    def __repr__(self):
        return f"{type(self).__name__}(d={self.d}, m={self.m}, g={self.g.kind})"

    # noise
    def sample_noise(self, rng, shape):
        """Draw i.i.d. noise samples with shape ``(*shape, noise_width)``."""
        raise NotImplementedError

    # stochastic oracles, averaged over the batch axis
    def stoch_loss(self, x, noise):
        raise UnsupportedOperation(f"{self.name}: no stochastic loss")

    def stoch_grad(self, x, noise):
        raise NotImplementedError

    def stoch_hess(self, x, noise):
        raise UnsupportedOperation(f"{self.name}: no stochastic Hessian")

    # mean oracles
    def mean_loss(self, x):
        raise UnsupportedOperation(f"{self.name}: no mean loss oracle")

    def mean_grad(self, x):
        raise UnsupportedOperation(f"{self.name}: no mean gradient oracle")

    def mean_hess(self, x):
        raise UnsupportedOperation(f"{self.name}: no mean Hessian oracle")

    def sigma_exact(self, x):
        raise UnsupportedOperation(f"{self.name}: no closed-form covariance")

    # derived quantities
    def potential(self, x):
        """``V(x) = f(x) + g(Ax)``; batched over leading axis."""
        x = _as_batch(x, self.d)
        return self.mean_loss(x) + self.g.value(x @ self.A.T)

    def potential_grad(self, x):
        """``f'(x) + A^T g'(Ax)`` with the sign selection for l1."""
        x = _as_batch(x, self.d)
        return self.mean_grad(x) + self.g.grad(x @ self.A.T) @ self.A

    def sigma_sampled(self, x, N, rng):
        """Covariance of ``N`` fresh stochastic gradients about the mean one.

        Returns an array ``(n, d, d)``; the centring uses the exact mean
        gradient, so the estimate is PSD by construction.
        """
        x = _as_batch(x, self.d)
        n = x.shape[0]
        if N < 2:
            raise ProblemError("sigma_sampled needs N >= 2")
        noise = self.sample_noise(rng, (n, N))
        return self.sigma_from_noise(x, noise)

    def sigma_from_noise(self, x, noise):
        n, N = noise.shape[:2]
        # per-sample gradients: treat each sample as a batch of one
        flat = noise.reshape(n * N, 1, -1)
        xs = np.repeat(x, N, axis=0)
        gi = self.stoch_grad(xs, flat).reshape(n, N, self.d)
        dev = gi - self.mean_grad(x)[:, None, :]
        return np.einsum("nki,nkj->nij", dev, dev) / N

    def frozen(self):
        """Noise-free copy whose stochastic oracles equal the mean ones."""
        return FrozenProblem(self)


class FrozenProblem(StochasticProblem):
    """Deterministic version of a problem (``xi`` frozen at its mean)."""

    def __init__(self, base):
        self.base = base
        self.name = base.name + "-frozen"
        self.A, self.g, self.m, self.d = base.A, base.g, base.m, base.d
        self.quadratic = base.quadratic

    def sample_noise(self, rng, shape):
        return np.zeros((*shape, 1))

    def stoch_loss(self, x, noise):
        return self.base.mean_loss(x)

    def stoch_grad(self, x, noise):
        return self.base.mean_grad(x)

    def stoch_hess(self, x, noise):
        return self.base.mean_hess(x)

    def mean_loss(self, x):
        return self.base.mean_loss(x)

    def mean_grad(self, x):
        return self.base.mean_grad(x)

    def mean_hess(self, x):
        return self.base.mean_hess(x)

    def sigma_exact(self, x):
        x = _as_batch(x, self.d)
        return np.zeros((x.shape[0], self.d, self.d))


class ToyProblem(StochasticProblem):
    """Scalar quartic ``f(x, xi) = (xi+1) x^4 + (2+xi) x^2 - (1+xi) x``.

    ``xi`` is +1 or -1 with equal probability and ``A = 1``.
    """

    name = "toy"

    def __init__(self, g):
        super().__init__(np.eye(1), g)

    def sample_noise(self, rng, shape):
        return (2.0 * rng.integers(0, 2, size=(*shape, 1)) - 1.0)

    def stoch_loss(self, x, noise):
        xi = noise[..., 0]
        x = x[:, :1]
        val = (xi + 1) * x ** 4 + (2 + xi) * x ** 2 - (1 + xi) * x
        return val.mean(axis=1)

    def stoch_grad(self, x, noise):
        xi = noise[..., 0].mean(axis=1, keepdims=True)
        return 4 * (xi + 1) * x ** 3 + 2 * (2 + xi) * x - (1 + xi)

    def stoch_hess(self, x, noise):
        xi = noise[..., 0].mean(axis=1, keepdims=True)
        return (12 * (xi + 1) * x ** 2 + 2 * (2 + xi))[:, :, None]

    def mean_loss(self, x):
        x = _as_batch(x, 1)[:, 0]
        return x ** 4 + 2 * x ** 2 - x

    def mean_grad(self, x):
        x = _as_batch(x, 1)
        return 4 * x ** 3 + 4 * x - 1

    def mean_hess(self, x):
        x = _as_batch(x, 1)
        return (12 * x ** 2 + 4)[:, :, None]

    def sigma_exact(self, x):
        x = _as_batch(x, 1)
        return ((4 * x ** 3 + 2 * x - 1) ** 2)[:, :, None]


class RegressionProblem(StochasticProblem):
    """Generalised ridge/lasso regression with a penalty matrix ``A``.

    ``f(x, xi) = 0.5 (xi_in^T x - xi_obs)^2`` with ``xi_in`` uniform on
    ``[-0.5, 0.5]^d`` and ``xi_obs = xi_in^T v + zeta``,
    ``zeta ~ N(0, sigma_zeta_sq)``. A noise sample is the row
    ``(xi_in, zeta)``.
    """

    quadratic = True

    def __init__(self, A, g, v, sigma_zeta_sq, name="regression"):
        super().__init__(A, g)
        if sigma_zeta_sq < 0:
            raise ProblemError("sigma_zeta_sq must be nonnegative")
        self.v = np.asarray(v, dtype=float).reshape(self.d)
        self.sigma_zeta_sq = float(sigma_zeta_sq)
        self.Omega = np.eye(self.d) / 12.0
        self.noise_width = self.d + 1
        self.name = name

    def sample_noise(self, rng, shape):
        xi_in = rng.uniform(-0.5, 0.5, size=(*shape, self.d))
        zeta = rng.normal(0.0, np.sqrt(self.sigma_zeta_sq), size=(*shape, 1))
        return np.concatenate([xi_in, zeta], axis=-1)

    def _split(self, noise):
        return noise[..., : self.d], noise[..., self.d]

    def stoch_loss(self, x, noise):
        xi, zeta = self._split(noise)
        res = np.einsum("nbi,ni->nb", xi, x - self.v) - zeta
        return 0.5 * (res ** 2).mean(axis=1)

    def stoch_grad(self, x, noise):
        xi, zeta = self._split(noise)
        res = np.einsum("nbi,ni->nb", xi, x - self.v) - zeta
        return np.einsum("nb,nbi->ni", res, xi) / xi.shape[1]

    def stoch_hess(self, x, noise):
        xi, _ = self._split(noise)
        return np.einsum("nbi,nbj->nij", xi, xi) / xi.shape[1]

    def mean_loss(self, x):
        w = _as_batch(x, self.d) - self.v
        return 0.5 * np.einsum("ni,ij,nj->n", w, self.Omega, w) + 0.5 * self.sigma_zeta_sq

    def mean_grad(self, x):
        return (_as_batch(x, self.d) - self.v) @ self.Omega

    def mean_hess(self, x):
        x = _as_batch(x, self.d)
        return np.broadcast_to(self.Omega, (x.shape[0], self.d, self.d)).copy()

    def sigma_exact(self, x):
        # fourth moments of U(-1/2, 1/2): E xi^2 = 1/12, E xi^4 = 1/80
        w = _as_batch(x, self.d) - self.v
        n, d = w.shape
        eye = np.eye(d)
        sq = np.sum(w * w, axis=1)
        S = (sq[:, None, None] * eye + np.einsum("ni,nj->nij", w, w)) / 144.0
        S += (1.0 / 80.0 - 1.0 / 48.0) * (w * w)[:, :, None] * eye
        S += self.sigma_zeta_sq / 12.0 * eye
        return S

    def minimizer(self):
        """Exact minimiser for the ridge case ``g = beta/2 |z|^2``."""
        if self.g.kind != "quadratic":
            raise UnsupportedOperation("closed-form minimiser only for ridge")
        H = self.Omega + self.g.beta * self.A.T @ self.A
        return np.linalg.solve(H, self.Omega @ self.v)


class CustomProblem(StochasticProblem):
    """Problem assembled from user callables.

    ``sampler(rng, shape)`` returns noise ``(*shape, p)``; ``grad(x, noise)``
    returns the batch-averaged stochastic gradient. The remaining callables
    are optional and unlock the matching oracles.
    """

    def __init__(self, A, g, sampler, grad, loss=None, hess=None,
                 mean_grad=None, mean_loss=None, mean_hess=None, sigma=None,
                 quadratic=False, name="custom"):
        super().__init__(A, g)
        self._sampler, self._grad = sampler, grad
        self._loss, self._hess = loss, hess
        self._mean_grad, self._mean_loss = mean_grad, mean_loss
        self._mean_hess, self._sigma = mean_hess, sigma
        self.quadratic = quadratic
        self.name = name

    def _call(self, fn, what, *args):
        if fn is None:
            raise UnsupportedOperation(f"{self.name}: no {what} oracle")
        return fn(*args)

    def sample_noise(self, rng, shape):
        return self._sampler(rng, shape)

    def stoch_grad(self, x, noise):
        return self._grad(x, noise)

    def stoch_loss(self, x, noise):
        return self._call(self._loss, "stochastic loss", x, noise)

    def stoch_hess(self, x, noise):
        return self._call(self._hess, "stochastic Hessian", x, noise)

    def mean_grad(self, x):
        return self._call(self._mean_grad, "mean gradient", _as_batch(x, self.d))

    def mean_loss(self, x):
        return self._call(self._mean_loss, "mean loss", _as_batch(x, self.d))

    def mean_hess(self, x):
        return self._call(self._mean_hess, "mean Hessian", _as_batch(x, self.d))

    def sigma_exact(self, x):
        return self._call(self._sigma, "covariance", _as_batch(x, self.d))


def quadratic_1d(a=1.0, b=0.0, sigma=1.0, g=None):
    """1-D quadratic ``V = a/2 (x - b)^2`` with additive Gaussian gradient noise.

    Used by the schedule demos and the two-phase examples; ``Sigma = sigma^2``.
    """
    g = g or Regularizer("zero")

    def sampler(rng, shape):
        return rng.normal(size=(*shape, 1))

    def grad(x, noise):
        return a * (x - b) + sigma * noise[..., 0].mean(axis=1, keepdims=True)

    def hess(x, noise):
        return np.full((x.shape[0], 1, 1), a)

    return CustomProblem(
        np.eye(1), g, sampler, grad,
        loss=lambda x, noise: (0.5 * a * (x - b) ** 2
                               + sigma * noise[..., 0].mean(axis=1, keepdims=True) * x)[:, 0],
        hess=hess,
        mean_grad=lambda x: a * (x - b),
        mean_loss=lambda x: 0.5 * a * (x[:, 0] - b) ** 2,
        mean_hess=lambda x: np.full((x.shape[0], 1, 1), a),
        sigma=lambda x: np.full((x.shape[0], 1, 1), sigma ** 2),
        quadratic=True, name="quadratic1d")


# -------------------------------------------------------------------- presets

_TOY_BETA = {"quadratic": 2.0, "l1": 1.0, "zero": 0.0}


def build_problem(preset, **params):
    """Build one of the preset problems.

    Parameters
    ----------
    preset : {"toy", "ridge", "lasso", "quad1d", "custom"}
    params
        ``toy``: ``g_kind`` (``quadratic`` gives ``g = z^2``, ``l1`` gives
        ``g = |z|``) and optional ``beta``. ``ridge``/``lasso``: ``d``,
        ``beta``, ``sigma_zeta_sq``, ``v`` or ``v_spec`` (``[a, b]`` for
        ``linspace(a, b, d)``) and ``a_scale`` (default 0.5 times Hilbert).
        ``custom``: keyword arguments of :class:`CustomProblem`.
    """
    if preset == "toy":
        kind = params.get("g_kind", "quadratic")
        beta = params.get("beta", _TOY_BETA.get(kind, 0.0))
        return ToyProblem(Regularizer(kind, beta))
    if preset in ("ridge", "lasso"):
        d = int(params.get("d", 3))
        if d < 1:
            raise ProblemError("d must be >= 1")
        beta = float(params.get("beta", 0.2))
        kind = params.get("g_kind", "quadratic" if preset == "ridge" else "l1")
        if "v" in params:
            v = np.asarray(params["v"], dtype=float)
        else:
            a, b = params.get("v_spec", (1.0, 2.0))
            v = np.linspace(a, b, d)
        A = params.get("A")
        if A is None:
            A = params.get("a_scale", 0.5) * hilbert(d)
        return RegressionProblem(A, Regularizer(kind, beta), v,
                                 params.get("sigma_zeta_sq", 0.1), name=preset)
    if preset == "quad1d":
        return quadratic_1d(params.get("a", 1.0), params.get("b", 0.0),
                            params.get("sigma", 1.0))
    if preset == "custom":
        return CustomProblem(**params)
    raise ProblemError(f"unknown preset {preset!r}")


def stoch_grad(problem, x, noise):
    """Single-point convenience wrapper: ``x`` shape ``(d,)``, noise ``(B, p)``."""
    x = np.asarray(x, dtype=float).reshape(1, problem.d)
    noise = np.asarray(noise, dtype=float).reshape(1, -1, problem.noise_width)
    return problem.stoch_grad(x, noise)[0]


def mean_grad(problem, x):
    return problem.mean_grad(np.asarray(x, dtype=float).reshape(1, problem.d))[0]


def potential(problem, x):
    return float(problem.potential(np.asarray(x, dtype=float).reshape(1, problem.d))[0])


def sigma_exact(problem, x):
    x = np.asarray(x, dtype=float).reshape(1, problem.d)
    return CovarianceEstimate(problem.sigma_exact(x)[0], "exact", x[0])


def sigma_sampled(problem, x, N, rng):
    x = np.asarray(x, dtype=float).reshape(1, problem.d)
    return CovarianceEstimate(problem.sigma_sampled(x, N, rng)[0], f"sampled({N})", x[0])
