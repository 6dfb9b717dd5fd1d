"""Monte Carlo ensembles of G-sADMM and SME paths.

Runs are grouped into fixed-size blocks by run index. A block's result only
depends on its seeds, and blocks are merged in index order, so the
statistics are bit-identical for any number of worker processes.
"""

import math
import multiprocessing as mp
from collections import namedtuple
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import sme as _sme
from . import solver as _solver

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


class EmptyEnsemble(RuntimeError):
    """Every run in the ensemble diverged."""


class InsufficientData(ValueError):
    pass


def splitmix64(z):
    z = (z + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def split_seed(base_seed, i):
    """Seed of run ``i``: ``splitmix64(splitmix64(base) ^ (i * GOLDEN mod 2^64))``."""
    return splitmix64(splitmix64(int(base_seed) & MASK64) ^ ((int(i) * GOLDEN) & MASK64))


def derive_seeds(base_seed, M):
    return [split_seed(base_seed, i) for i in range(M)]


# ----------------------------------------------------------- test functions

def phi_x_plus_x2(x):
    return np.sum(x + x * x, axis=-1)


def phi_sum_exp_neg(x):
    return np.sum(np.exp(-x), axis=-1)


def phi_first(x):
    return x[..., 0]


def make_test_fn(name, problem=None):
    """Test functions by name: ``x_plus_x2``, ``sum_exp_neg``, ``x`` and
    ``objective`` (the potential ``f(x) + g(Ax)`` of ``problem``)."""
    if name == "x_plus_x2":
        return phi_x_plus_x2
    if name == "sum_exp_neg":
        return phi_sum_exp_neg
    if name == "x":
        return phi_first
    if name == "objective":
        if problem is None:
            raise ValueError("objective test function needs a problem")

        def objective(x):
            flat = x.reshape(-1, problem.d)
            return problem.potential(flat).reshape(x.shape[:-1])
        return objective
    raise ValueError(f"unknown test function {name!r}")


# ---------------------------------------------------------------- moments

@dataclass
class _Moments:
    """Count, mean and centred sum of squares along the run axis."""

    n: int
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def of(cls, values):
        # values: (steps+1, n, ...)
        n = values.shape[1]
        if n == 0:
            shape = values.shape[:1] + values.shape[2:]
            return cls(0, np.zeros(shape), np.zeros(shape))
        mean = values.mean(axis=1)
        m2 = ((values - mean[:, None]) ** 2).sum(axis=1)
        return cls(n, mean, m2)

    def merge(self, other):
        if other.n == 0:
            return self
        if self.n == 0:
            return other
        n = self.n + other.n
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.n / n)
        m2 = self.m2 + other.m2 + delta * delta * (self.n * other.n / n)
        return _Moments(n, mean, m2)

    def std(self):
        if self.n < 2:
            return np.full_like(self.mean, np.nan)
        return np.sqrt(self.m2 / (self.n - 1))


@dataclass
class EnsembleStats:
    """Per-grid-time statistics over the completed (non-diverged) runs.

    ``std_*`` use the unbiased sample variance and are NaN when fewer than
    two runs completed. ``stderr_phi = std_phi / sqrt(n_completed)``.
    """

    ts: np.ndarray
    mean_phi: np.ndarray
    std_phi: np.ndarray
    mean_x: np.ndarray
    std_x: np.ndarray
    M: int
    diverged_count: int
    mean_z: np.ndarray = None
    std_z: np.ndarray = None
    mean_r: np.ndarray = None
    std_r: np.ndarray = None
    mean_ra: np.ndarray = None
    std_ra: np.ndarray = None
    seeds: list = field(default_factory=list, repr=False)
    kind: str = ""

    @property
    def completed(self):
        return self.M - self.diverged_count

    @property
    def stderr_phi(self):
        return self.std_phi / math.sqrt(self.completed)

    @property
    def stderr_x(self):
        return self.std_x / math.sqrt(self.completed)

    @property
    def std_defined(self):
        return self.completed >= 2


# ---------------------------------------------------------------- runners

class AdmmRunner:
    """Generates G-sADMM paths; records phi, x, z, |r| and |r^alpha|."""

    kind = "admm"

    def __init__(self, problem, config, test_fn=None, block_size=500):
        self.problem, self.config = problem, config
        self.test_fn = test_fn or phi_first
        self.block_size = block_size

    def grid(self):
        return self.config.epsilon * np.arange(self.config.steps + 1)

    def block(self, seeds):
        xs, zs, _, diverged, _ = _solver.simulate_batch(self.problem, self.config, seeds)
        keep = ~diverged
        xs, zs = xs[:, keep], zs[:, keep]
        rs, ras, _ = _solver.residuals(self.problem.A, xs, zs, self.config.alpha)
        out = {
            "phi": _Moments.of(self.test_fn(xs)),
            "x": _Moments.of(xs),
            "z": _Moments.of(zs),
            "r": _Moments.of(np.linalg.norm(rs, axis=-1)),
            "ra": _Moments.of(np.linalg.norm(ras, axis=-1)),
        }
        return out, int(diverged.sum())


class SmeRunner:
    """Generates SME paths on the ADMM grid; records phi and X."""

    kind = "sme"

    def __init__(self, problem, config, test_fn=None, block_size=500):
        self.problem, self.config = problem, config
        self.test_fn = test_fn or phi_first
        self.block_size = block_size

    def grid(self):
        return self.config.dt * np.arange(self.config.steps + 1)

    def block(self, seeds):
        Xs, diverged, _ = _sme.simulate_batch(self.problem, self.config, seeds)
        Xs = Xs[:, ~diverged]
        out = {"phi": _Moments.of(self.test_fn(Xs)), "x": _Moments.of(Xs)}
        return out, int(diverged.sum())


_WORKER_RUNNER = None


def _run_block(seeds):
    return _WORKER_RUNNER.block(seeds)


def run_ensemble(runner, M, base_seed, test_fn=None, workers=1):
    """Run ``M`` independent paths and aggregate per-step statistics.

    Run ``i`` uses ``split_seed(base_seed, i)``. ``workers`` only changes
    speed; the reduction is a fold over fixed blocks in run-index order.
    """
    global _WORKER_RUNNER
    if M < 1:
        raise ValueError("M must be >= 1")
    if test_fn is not None:
        runner.test_fn = test_fn
    seeds = derive_seeds(base_seed, M)
    bs = runner.block_size
    blocks = [seeds[i:i + bs] for i in range(0, M, bs)]

    if workers > 1 and len(blocks) > 1:
        _WORKER_RUNNER = runner
        try:
            ctx = mp.get_context("fork")
            with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
                results = list(pool.map(_run_block, blocks))
        finally:
            _WORKER_RUNNER = None
    else:
        results = [runner.block(b) for b in blocks]

    acc, n_div = None, 0
    for mom, nd in results:
        n_div += nd
        acc = mom if acc is None else {k: acc[k].merge(mom[k]) for k in acc}
    if n_div == M:
        raise EmptyEnsemble(f"all {M} runs diverged")

    extra = {}
    for key in ("z", "r", "ra"):
        if key in acc:
            extra["mean_" + key] = acc[key].mean
            extra["std_" + key] = acc[key].std()
    return EnsembleStats(
        ts=runner.grid(),
        mean_phi=acc["phi"].mean, std_phi=acc["phi"].std(),
        mean_x=acc["x"].mean, std_x=acc["x"].std(),
        M=M, diverged_count=n_div, seeds=seeds, kind=runner.kind, **extra)


# ------------------------------------------------------------ weak error

def _check_grids(a, b):
    if len(a.ts) != len(b.ts) or not np.allclose(a.ts, b.ts, rtol=1e-12, atol=1e-12):
        raise ValueError("ensembles are on different time grids")


def weak_error(stats_admm, stats_sme):
    """``max_{k >= 1} |E phi(x_k) - E phi(X_{k eps})|``."""
    _check_grids(stats_admm, stats_sme)
    return float(np.max(np.abs(stats_admm.mean_phi[1:] - stats_sme.mean_phi[1:])))


def weak_error_stderr(stats_admm, stats_sme):
    """Pooled Monte Carlo standard error of the mean difference at the argmax."""
    diff = np.abs(stats_admm.mean_phi[1:] - stats_sme.mean_phi[1:])
    k = int(np.argmax(diff)) + 1
    return float(math.hypot(stats_admm.stderr_phi[k], stats_sme.stderr_phi[k]))


OrderFit = namedtuple("OrderFit", "slope stderr intercept")


def convergence_order(m_values, errs):
    """Least-squares slope of ``log2(err)`` against ``-m``.

    Order one gives slope 1. Nonpositive errors are dropped; fewer than
    three remaining points raise :class:`InsufficientData`.
    """
    m = np.asarray(m_values, dtype=float)
    e = np.asarray(errs, dtype=float)
    ok = e > 0
    m, e = m[ok], e[ok]
    if len(m) < 3:
        raise InsufficientData("need at least 3 positive errors")
    X = np.column_stack([-m, np.ones_like(m)])
    y = np.log2(e)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    dof = len(m) - 2
    s2 = float(resid @ resid) / dof if dof > 0 else 0.0
    cov = s2 * np.linalg.inv(X.T @ X)
    return OrderFit(float(coef[0]), float(math.sqrt(cov[0, 0])), float(coef[1]))


@dataclass
class WeakErrorReport:
    m_values: list
    errs: list
    stderrs: list
    slope: float
    slope_ci: float


def weak_error_report(m_values, pairs):
    """Build a report from ``(stats_admm, stats_sme)`` pairs, one per m."""
    errs = [weak_error(a, b) for a, b in pairs]
    ses = [weak_error_stderr(a, b) for a, b in pairs]
    if len(m_values) >= 3:
        fit = convergence_order(m_values, errs)
        slope, ci = fit.slope, fit.stderr
    else:
        slope, ci = float("nan"), float("nan")
    return WeakErrorReport(list(m_values), errs, ses, slope, ci)


# ------------------------------------------------------- scaling reports

@dataclass
class ResidualReport:
    rhos: np.ndarray
    max_mean_r: np.ndarray
    max_std_r: np.ndarray
    max_mean_ra: np.ndarray
    max_std_ra: np.ndarray
    rate_r: float
    rate_ra: float
    rate_std_r: float
    rate_std_ra: float


def _decay_rate(rhos, vals):
    # log2 decrease per doubling of rho
    slope = np.polyfit(np.log2(rhos), np.log2(vals), 1)[0]
    return float(-slope)


def residual_scaling(entries):
    """Residual sizes over a grid of ``rho``.

    ``entries`` is a list of ``(rho, EnsembleStats)`` from :class:`AdmmRunner`.
    Reports ``max_k E|r_k|``, ``max_k std|r_k|`` and the same for the
    relaxed residual, plus their fitted decay per doubling of ``rho``.
    """
    if len(entries) < 3:
        raise InsufficientData("residual scaling needs >= 3 values of rho")
    entries = sorted(entries, key=lambda e: e[0])
    rhos = np.array([e[0] for e in entries], dtype=float)

    def peak(attr):
        return np.array([np.nanmax(getattr(s, attr)[1:]) for _, s in entries])

    mr, sr, mra, sra = peak("mean_r"), peak("std_r"), peak("mean_ra"), peak("std_ra")
    return ResidualReport(rhos, mr, sr, mra, sra,
                          _decay_rate(rhos, mr), _decay_rate(rhos, mra),
                          _decay_rate(rhos, sr), _decay_rate(rhos, sra))


@dataclass
class StdScaling:
    times: np.ndarray
    curves: dict
    max_gap: float


def std_scaling(entries, which="x", component=0, window=(0.1, 0.5)):
    """Collapse ``eps^{-1/2} std`` curves onto the coarsest common grid.

    ``entries`` is ``[(eps, EnsembleStats), ...]``. ``which`` selects
    ``x``, ``z`` or ``phi``. The gap between two curves at a time is
    ``|a - b| / ((a + b) / 2)``; ``max_gap`` is its maximum over pairs and
    over grid times inside ``window``.
    """
    if len(entries) < 2:
        raise InsufficientData("std scaling needs >= 2 values of epsilon")
    entries = sorted(entries, key=lambda e: -e[0])
    coarse_ts = entries[0][1].ts
    lo, hi = window
    sel = (coarse_ts >= lo - 1e-12) & (coarse_ts <= hi + 1e-12)
    times = coarse_ts[sel]
    curves = {}
    for eps, st in entries:
        arr = st.std_phi if which == "phi" else getattr(st, "std_" + which)
        if arr.ndim > 1:
            arr = arr[:, component]
        idx = np.rint(times / eps).astype(int)
        if np.any(np.abs(idx * eps - times) > 1e-9 * max(1.0, times.max(initial=1.0))):
            raise ValueError("grids are not nested")
        curves[eps] = arr[idx] / math.sqrt(eps)
    keys = list(curves)
    gap = 0.0
    for i in range(len(keys)):
        for j in range(i + 1, len(keys)):
            a, b = curves[keys[i]], curves[keys[j]]
            gap = max(gap, float(np.max(np.abs(a - b) / (0.5 * (a + b)))))
    return StdScaling(times, curves, gap)


def transition_time(stats, x_star):
    """First grid time with ``|E x - x*| <= |std x|``; ``inf`` if never."""
    gap = np.linalg.norm(np.atleast_2d(stats.mean_x.T).T - np.asarray(x_star, dtype=float), axis=-1)
    spread = np.linalg.norm(np.atleast_2d(stats.std_x.T).T, axis=-1)
    hit = np.nonzero(gap <= spread)[0]
    if len(hit) == 0:
        return math.inf
    return float(stats.ts[hit[0]])


def transition_time_closed_form(x0, sigma, epsilon, a=1.0):
    """``t*`` for ``dX = -a X dt + sqrt(eps) sigma dW`` started at ``x0``.

    Mean ``x0 e^{-at}`` meets the std ``sqrt(eps sigma^2 (1 - e^{-2at}) / 2a)``
    at ``t* = log(2 a x0^2 / (sigma^2 eps) + 1) / (2a)``.
    """
    return math.log(2 * a * x0 * x0 / (sigma * sigma * epsilon) + 1) / (2 * a)
