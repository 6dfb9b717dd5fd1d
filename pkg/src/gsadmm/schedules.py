"""Adaptive schedules for the step size, batch size and preconditioner.

For the 1-D quadratic ``V = a/2 (x - b)^2`` with constant noise the optimal
step-size control is ``u* = min(1, 2 EV / (eps sigma^2))``; after the
transition time ``t*`` it becomes ``1 / (1 + a (t - t*))``. Shrinking the
step by ``u`` is the same as growing ``Mhat`` to ``Mhat_0 / u``, and with
``alpha = omega = 1`` that is ``c_t = c_0 (1 + a (t - t*))``.

All functions here are pure.
"""

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

U_MIN = 1e-6

KINDS = ("constant", "feedback_u", "open_loop_u", "batch_growth", "mhat_growth")


class ScheduleError(ValueError):
    """The schedule is undefined for the given inputs."""


def feedback_u(EV, epsilon, sigma, u_min=U_MIN):
    """Feedback step-size control ``min(1, 2 EV / (eps sigma^2))``.

    Clamped below by ``u_min`` so the step never vanishes at the optimum.

    Examples
    --------
    >>> feedback_u(0.25 * 0.1, 0.1, 1.0)
    0.5
    """
    if EV < 0:
        raise ScheduleError("EV must be nonnegative")
    if not sigma > 0 or not epsilon > 0:
        raise ScheduleError("epsilon and sigma must be positive")
    return float(max(u_min, min(1.0, 2.0 * EV / (epsilon * sigma * sigma))))


def open_loop_u(t, t_star, a):
    """``1 / (1 + a (t - t*))`` after ``t*``, 1 before."""
    if not a > 0:
        raise ScheduleError("a must be positive")
    if t <= t_star:
        return 1.0
    return 1.0 / (1.0 + a * (t - t_star))


def batch_growth(t, t_star, B0, sigma, epsilon, X_tstar):
    """Batch size keeping the spread below the mean gap after ``t*``.

    Implements ``B0 (sigma^2 eps / (2 X_{t*})) (e^{2(t-t*)} - 1)`` as
    printed, rounded and clamped below by ``B0``. Note the division by
    ``X_{t*}`` rather than its square.
    """
    B0 = int(B0)
    if B0 < 1:
        raise ScheduleError("B0 must be >= 1")
    if X_tstar == 0:
        raise ScheduleError("batch schedule undefined for X_tstar = 0")
    if t <= t_star:
        return B0
    try:
        raw = B0 * (sigma * sigma * epsilon / (2.0 * X_tstar)) * math.expm1(2.0 * (t - t_star))
    except OverflowError:
        raw = math.inf
    if not math.isfinite(raw):
        raise ScheduleError("batch size overflow")
    return max(B0, int(round(raw)))


def mhat_scale(t, t_star, a):
    """Scalar factor ``1 + a max(0, t - t*)`` applied to ``Mhat_0``."""
    return 1.0 + a * max(0.0, t - t_star)


def mhat_schedule(base, t, t_star, a):
    """``base (1 + a max(0, t - t*))`` for a positive definite ``base``."""
    M = np.atleast_2d(np.asarray(base, dtype=float))
    if np.linalg.eigvalsh(0.5 * (M + M.T))[0] <= 0:
        raise ScheduleError("base Mhat must be positive definite")
    return M * mhat_scale(t, t_star, a)


def tau_schedule(tau0, t, t_star, a):
    """``tau_0 (1 + a (t - t*))`` after ``t*``; the ``alpha = omega = 1`` case."""
    return tau0 * mhat_scale(t, t_star, a)


def largest_curvature(problem, x):
    """Largest eigenvalue of the Hessian of ``V = f + g(Ax)`` at ``x``; the
    ``a`` of a local diagonal-quadratic model.

    Only a quadratic ``g`` adds curvature; ``l1`` is flat almost everywhere.
    """
    H = problem.mean_hess(np.atleast_2d(np.asarray(x, dtype=float)))[0]
    if problem.g.kind == "quadratic":
        H = H + problem.g.beta * problem.A.T @ problem.A
    return float(np.linalg.eigvalsh(0.5 * (H + H.T))[-1])


class SmoothedEV:
    """Moving average of the ensemble estimate of ``E V`` over ``window`` steps."""

    def __init__(self, window=10):
        if window < 1:
            raise ValueError("window must be >= 1")
        self._buf = deque(maxlen=window)

    def update(self, values):
        self._buf.append(float(np.mean(values)))
        return self.value

    @property
    def value(self):
        if not self._buf:
            raise ScheduleError("no EV observations yet")
        return sum(self._buf) / len(self._buf)


@dataclass
class ScheduleSpec:
    """A named schedule with its parameters.

    ``params`` keys by kind:

    * ``constant``: ``value`` (default 1)
    * ``feedback_u``: ``epsilon``, ``sigma``, optional ``u_min``
    * ``open_loop_u``, ``mhat_growth``: ``t_star``, ``a``
    * ``batch_growth``: ``t_star``, ``B0``, ``sigma``, ``epsilon``, ``X_tstar``
    """

    kind: str = "constant"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ScheduleError(f"unknown schedule kind {self.kind!r}")

    def __call__(self, t, EV=None):
        p = self.params
        if self.kind == "constant":
            return p.get("value", 1.0)
        if self.kind == "feedback_u":
            if EV is None:
                raise ScheduleError("feedback_u needs an EV estimate")
            return feedback_u(EV, p["epsilon"], p["sigma"], p.get("u_min", U_MIN))
        if self.kind == "open_loop_u":
            return open_loop_u(t, p["t_star"], p["a"])
        if self.kind == "mhat_growth":
            return mhat_scale(t, p["t_star"], p["a"])
        return batch_growth(t, p["t_star"], p["B0"], p["sigma"], p["epsilon"], p["X_tstar"])

    def as_dict(self):
        return {"kind": self.kind, "params": dict(self.params)}
