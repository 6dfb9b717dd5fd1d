"""Experiment configs, figure presets and the pipelines behind the CLI.

A config is a JSON object; anything not given falls back to the defaults of
the chosen problem, then to :data:`DEFAULTS`. Every pipeline writes
plot-ready CSV files plus ``summary.json`` and ``manifest.json``.
"""

import copy
import importlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import io as _io
from .ensemble import (AdmmRunner, EmptyEnsemble, SmeRunner, derive_seeds,
                       make_test_fn, residual_scaling, run_ensemble, split_seed,
                       std_scaling, transition_time, transition_time_closed_form,
                       weak_error_report)
from .problem import ProblemError, build_problem
from .schedules import SmoothedEV, ScheduleSpec, batch_growth, feedback_u, open_loop_u
from .sme import SmeConfig, gradient_flow_reference, m_hat
from .solver import SolverConfig, run_trajectory


class ConfigError(ValueError):
    """Invalid experiment configuration."""


class ExperimentFailed(RuntimeError):
    """An ensemble was dominated by diverged runs."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


PIPELINES = ("admm", "sme", "overlay", "paths", "weak_error", "residual_scan",
             "std_scan", "alpha_scan", "c_scan", "divergence", "schedule_demo")
PROBLEMS = ("toy", "ridge", "lasso", "quad1d", "custom")
PHIS = ("x_plus_x2", "sum_exp_neg", "x", "objective")

DEFAULTS = {
    "experiment": "toy",
    "pipeline": "weak_error",
    "problem": {},
    "solver": {
        "T": 0.5, "m": 6, "m_grid": [4, 5, 6, 7, 8, 9, 10, 11], "rho": None,
        "alpha": 1.5, "omega": 1.0, "omega1": 0.0, "c": 1.0,
        "x0": [1.0], "z0": None, "batch": 1,
    },
    "sme": {"sigma_mode": "exact", "em_substeps": 4, "sigma_N": 9},
    "ensemble": {"M": 10000, "base_seed": 20240422},
    "phi": "x_plus_x2",
    "sweep": {},
    "schedule": {"kind": "constant", "params": {}},
    "outputs": {"directory": "out", "formats": ["csv", "json"]},
    "meta": {},
}

# per-problem overrides of DEFAULTS
PROBLEM_DEFAULTS = {
    "toy": {"problem": {"g_kind": "quadratic"}},
    "ridge": {
        "problem": {"d": 3, "beta": 0.2, "sigma_zeta_sq": 0.1, "v_spec": [1.0, 2.0]},
        "solver": {"T": 40.0, "m": 5, "m_grid": [5, 6, 7, 8, 9], "alpha": 1.5,
                   "omega": 1.0, "omega1": 1.0, "c": 1.0, "x0": [0.0, 0.0, 0.0]},
        "ensemble": {"M": 400},
        "phi": "sum_exp_neg",
    },
    "quad1d": {
        "problem": {"a": 1.0, "b": 0.0, "sigma": 1.0},
        "solver": {"T": 8.0, "m": 9, "alpha": 1.0, "omega": 1.0, "omega1": 1.0,
                   "c": 1.0, "x0": [1.0]},
        "ensemble": {"M": 2000},
        "phi": "objective",
    },
}
PROBLEM_DEFAULTS["lasso"] = copy.deepcopy(PROBLEM_DEFAULTS["ridge"])
PROBLEM_DEFAULTS["lasso"]["ensemble"] = {"M": 4000}
PROBLEM_DEFAULTS["custom"] = {}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


PRESETS = {
    "fig3_1a": {
        "experiment": "toy", "pipeline": "overlay",
        "solver": {"m": 6, "alpha": 1.5},
        "meta": {"reference_M": 100000},
    },
    "fig3_1b": {
        "experiment": "toy", "pipeline": "weak_error",
        "sweep": {"alphas": [0.5, 1.0, 1.5], "g_kinds": ["quadratic", "l1"]},
        "meta": {"reference_M": 100000},
    },
    "fig5_2": {
        "experiment": "toy", "pipeline": "paths",
        "solver": {"m": 6, "alpha": 1.5}, "ensemble": {"M": 400},
        "meta": {"reference_M": 400},
    },
    "fig5_3": {
        "experiment": "toy", "pipeline": "alpha_scan",
        "solver": {"m": 7}, "sweep": {"alphas": [0.25, 0.5, 1.0, 1.5, 1.75]},
        "meta": {"reference_M": 10000},
    },
    "fig5_4": {
        "experiment": "toy", "pipeline": "std_scan",
        "sweep": {"m_values": [5, 6, 7], "alphas": [0.5, 1.0, 1.5]},
        "meta": {"reference_M": 100000},
    },
    "fig5_5": {
        "experiment": "toy", "pipeline": "residual_scan",
        "sweep": {"rho_exponents": [4, 5, 6, 7, 8, 9], "alphas": [0.5, 1.0, 1.5]},
        "ensemble": {"M": 1000},
        "meta": {"reference_M": 100000},
    },
    "fig5_6": {
        "experiment": "toy", "pipeline": "residual_scan",
        "sweep": {"rho_exponents": [4, 5, 6, 7, 8, 9], "alphas": [1.0, 1.5]},
        "ensemble": {"M": 1000},
        "meta": {"reference_M": 100000},
    },
    "fig5_7": {
        "experiment": "ridge", "pipeline": "overlay",
        "sweep": {"m_values": [5, 6, 7]},
        "meta": {"reference_M": 400},
    },
    "fig5_8": {
        "experiment": "lasso", "pipeline": "overlay",
        "sweep": {"m_values": [5, 6, 7]},
        "meta": {"reference_M": 4000},
    },
    "fig5_9": {
        "experiment": "ridge", "pipeline": "weak_error",
        "solver": {"m_grid": [4, 5, 6, 7, 8]}, "ensemble": {"M": 4000},
        "sweep": {"alphas": [1.5], "error": "terminal"},
        "meta": {"reference_M": 4000},
    },
    "fig5_10": {
        "experiment": "ridge", "pipeline": "c_scan",
        "solver": {"m": 8}, "sweep": {"omegas": [1.0, 0.0], "c_values": [0.15, 0.2, 0.5, 1.0]},
        "meta": {"reference_M": 400},
    },
    "fig5_11": {
        "experiment": "ridge", "pipeline": "divergence",
        "solver": {"alpha": 2.02, "omega": 0.0, "omega1": 1.0, "c": 1.0},
        "sweep": {"m_values": [8, 10, 12], "alphas": [1.9, 2.02]},
        "meta": {"reference_M": 400},
    },
    "schedule_demo": {
        "experiment": "quad1d", "pipeline": "schedule_demo",
        "schedule": {"kind": "open_loop_u", "params": {}},
    },
}
PRESETS["fig5_1b"] = PRESETS["fig3_1b"]
ALIASES = {"toy": "fig3_1b", "ridge": "fig5_7", "lasso": "fig5_8"}


@dataclass
class ExperimentConfig:
    """Validated experiment configuration (see :data:`DEFAULTS` for the schema)."""

    experiment: str
    pipeline: str
    problem: dict
    solver: dict
    sme: dict
    ensemble: dict
    phi: str
    sweep: dict
    schedule: dict
    outputs: dict
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        unknown = set(d) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        exp = d.get("experiment", DEFAULTS["experiment"])
        if exp not in PROBLEMS:
            raise ConfigError(f"experiment must be one of {PROBLEMS}, got {exp!r}")
        merged = _merge(_merge(DEFAULTS, PROBLEM_DEFAULTS[exp]), d)
        for key in DEFAULTS:
            if isinstance(DEFAULTS[key], dict) and not isinstance(merged[key], dict):
                raise ConfigError(f"{key!r} must be an object")
        cfg = cls(**merged)
        cfg.validate()
        return cfg

    @classmethod
    def preset(cls, name, overrides=None):
        name = ALIASES.get(name, name)
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        d = _merge(PRESETS[name], overrides or {})
        d.setdefault("meta", {})
        d["meta"] = dict(d["meta"], preset=name)
        return cls.from_dict(d)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def to_dict(self):
        return {k: copy.deepcopy(getattr(self, k)) for k in DEFAULTS}

    def validate(self):
        if self.pipeline not in PIPELINES:
            raise ConfigError(f"pipeline must be one of {PIPELINES}, got {self.pipeline!r}")
        if self.phi not in PHIS:
            raise ConfigError(f"phi must be one of {PHIS}")
        s = self.solver
        grid = s.get("m_grid")
        if self.pipeline == "weak_error":
            if not grid:
                raise ConfigError("m_grid must be nonempty")
            if len(set(grid)) != len(grid):
                raise ConfigError("m_grid entries must be distinct")
        for key in ("T", "c", "alpha"):
            if not isinstance(s.get(key), (int, float)):
                raise ConfigError(f"solver.{key} must be a number")
        if s["T"] <= 0:
            raise ConfigError("solver.T must be positive")
        if s["c"] < 0:
            raise ConfigError("solver.c must be nonnegative")
        M = self.ensemble.get("M")
        if not isinstance(M, int) or M < 1:
            raise ConfigError("ensemble.M must be a positive integer")
        seed = self.ensemble.get("base_seed")
        if not isinstance(seed, int) or not 0 <= seed < 2 ** 64:
            raise ConfigError("ensemble.base_seed must be an unsigned 64-bit integer")
        if self.sme.get("sigma_mode") not in ("exact", "sampled"):
            raise ConfigError("sme.sigma_mode must be 'exact' or 'sampled'")
        if not isinstance(self.sme.get("em_substeps"), int) or self.sme["em_substeps"] < 1:
            raise ConfigError("sme.em_substeps must be a positive integer")
        try:
            ScheduleSpec(self.schedule.get("kind", "constant"), self.schedule.get("params", {}))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.experiment == "custom" and "factory" not in self.problem:
            raise ConfigError("custom problems need problem.factory = 'module:function'")

    # builders
    def build_problem(self, **override):
        params = dict(self.problem, **override)
        try:
            if self.experiment == "custom":
                mod, _, fn = params.pop("factory").partition(":")
                return getattr(importlib.import_module(mod), fn)(**params)
            return build_problem(self.experiment, **params)
        except (ProblemError, ImportError, AttributeError, TypeError) as exc:
            raise ConfigError(f"cannot build problem: {exc}") from exc

    def solver_config(self, m=None, rho=None, **override):
        s = dict(self.solver)
        s.update(override)
        T = s["T"]
        if rho is None:
            rho = s["rho"] if m is None and s.get("rho") else 2.0 ** (s["m"] if m is None else m) / T
        kw = {k: s[k] for k in ("alpha", "omega", "omega1", "c", "x0", "z0", "batch")}
        if "c_schedule" in s:
            kw["c_schedule"] = s["c_schedule"]
        try:
            return SolverConfig(rho=rho, T=T, **kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def sme_config(self, solver_config, problem, **kw):
        opts = {k: self.sme[k] for k in ("sigma_mode", "em_substeps", "sigma_N") if k in self.sme}
        opts.update(kw)
        return SmeConfig.from_solver(solver_config, problem, **opts)

    def test_fn(self, problem):
        return make_test_fn(self.phi, problem)


# ------------------------------------------------------------ run context

class _Context:
    """Hands out ensemble seeds in order and records them for the manifest."""

    def __init__(self, cfg, workers):
        self.cfg, self.workers = cfg, workers
        self.base_seed = cfg.ensemble["base_seed"]
        self.records = []
        self.files = {}

    def next_seed(self):
        return split_seed(self.base_seed, len(self.records))

    def ensemble(self, label, runner, M=None, allow_divergence=False):
        M = M or self.cfg.ensemble["M"]
        seed = self.next_seed()
        rec = {"label": label, "base_seed": seed, "M": M, "seeds": derive_seeds(seed, M)}
        self.records.append(rec)
        try:
            stats = run_ensemble(runner, M, seed, workers=self.workers)
        except EmptyEnsemble:
            rec["diverged"] = M
            if allow_divergence:
                return None
            raise ExperimentFailed(f"{label}: all {M} runs diverged",
                                   {"label": label, "M": M, "diverged": M})
        rec["diverged"] = stats.diverged_count
        if not allow_divergence and stats.diverged_count > M / 2:
            raise ExperimentFailed(
                f"{label}: {stats.diverged_count} of {M} runs diverged",
                {"label": label, "M": M, "diverged": stats.diverged_count})
        return stats

    def emit(self, name, cols):
        self.files[name] = cols


def _tag(v):
    return format(v, "g").replace(".", "p").replace("-", "m")


def _grid_m(cfg):
    return cfg.sweep.get("m_values", [cfg.solver["m"]])


# -------------------------------------------------------------- pipelines

def _pipe_admm(cfg, ctx):
    problem = cfg.build_problem()
    sc = cfg.solver_config()
    phi = cfg.test_fn(problem)
    seed = ctx.next_seed()
    stats = ctx.ensemble("admm", AdmmRunner(problem, sc, phi))
    traj = run_trajectory(problem, sc, split_seed(seed, 0), phi)
    ctx.emit("trajectory.csv", _io.trajectory_columns(traj))
    ctx.emit("admm_stats.csv", {"t": stats.ts, **_io.stats_columns(stats)})
    return {"epsilon": sc.epsilon, "steps": sc.steps, "diverged": stats.diverged_count,
            "terminal_mean_phi": stats.mean_phi[-1]}


def _pipe_sme(cfg, ctx):
    problem = cfg.build_problem()
    sc = cfg.solver_config()
    me = cfg.sme_config(sc, problem)
    phi = cfg.test_fn(problem)
    seed = ctx.next_seed()
    stats = ctx.ensemble("sme", SmeRunner(problem, me, phi))
    from .sme import run_sme
    traj = run_sme(problem, me, split_seed(seed, 0))
    ctx.emit("sme_trajectory.csv", _io.sme_trajectory_columns(traj, phi))
    ctx.emit("sme_stats.csv", {"t": stats.ts, **_io.stats_columns(stats)})
    return {"epsilon": me.epsilon, "mhat": me.mhat.tolist(),
            "terminal_mean_phi": stats.mean_phi[-1]}


def overlay_summary(a, b, eps, window=(0.1, 0.5)):
    """Agreement measures between an ADMM and an SME ensemble on one grid."""
    se = np.hypot(a.stderr_x, b.stderr_x)
    dx = np.abs(a.mean_x - b.mean_x)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, dx / se, np.where(dx > 0, np.inf, 0.0))
        # std is 0 at t = 0, outside any window of interest
        std_gap = np.abs(a.std_x - b.std_x) / b.std_x
        phi_gap = np.abs(a.mean_phi - b.mean_phi) / np.abs(b.mean_phi)
    lo, hi = window
    sel = (a.ts >= lo - 1e-12) & (a.ts <= hi + 1e-12)
    return {
        "max_mean_z": float(np.max(z[1:])),
        "max_mean_diff": float(np.max(dx[1:])),
        "max_std_rel_gap": float(np.max(std_gap[sel])) if np.any(sel) else float("nan"),
        "max_phi_rel_gap": float(np.max(phi_gap)),
        "epsilon": eps,
    }


def _pipe_overlay(cfg, ctx):
    problem = cfg.build_problem()
    phi = cfg.test_fn(problem)
    T = cfg.solver["T"]
    window = tuple(cfg.sweep.get("std_window", (0.2 * T, T)))
    out = {}
    for m in _grid_m(cfg):
        sc = cfg.solver_config(m=m)
        a = ctx.ensemble(f"admm_m{m}", AdmmRunner(problem, sc, phi))
        b = ctx.ensemble(f"sme_m{m}", SmeRunner(problem, cfg.sme_config(sc, problem), phi))
        root = math.sqrt(sc.epsilon)
        cols = {"t": a.ts, **_io.stats_columns(a, "admm"), **_io.stats_columns(b, "sme"),
                "admm_rescaled_std_phi": a.std_phi / root,
                "sme_rescaled_std_phi": b.std_phi / root}
        ctx.emit(f"overlay_m{m}.csv", cols)
        out[f"m{m}"] = overlay_summary(a, b, sc.epsilon, window)
    return out


def _pipe_paths(cfg, ctx):
    problem = cfg.build_problem()
    sc = cfg.solver_config()
    me = cfg.sme_config(sc, problem)
    from .solver import simulate_batch as admm_batch
    from .sme import simulate_batch as sme_batch
    M = cfg.ensemble["M"]
    summary = {}
    for label, fn, conf in (("admm", admm_batch, sc), ("sme", sme_batch, me)):
        seed = ctx.next_seed()
        ctx.records.append({"label": label, "base_seed": seed, "M": M,
                            "seeds": derive_seeds(seed, M)})
        res = fn(problem, conf, derive_seeds(seed, M))
        xs, div = res[0], res[-2]
        ctx.records[-1]["diverged"] = int(div.sum())
        S = xs.shape[0]
        run = np.repeat(np.arange(M), S)
        step = np.tile(np.arange(S), M)
        cols = {"run": run, "step": step, "t": step * sc.epsilon}
        for i in range(problem.d):
            cols[f"{'x' if label == 'admm' else 'X'}_{i}"] = xs[:, :, i].T.ravel()
        ctx.emit(f"paths_{label}.csv", cols)
        summary[label] = {"runs": M, "diverged": int(div.sum())}
    return summary


def _pipe_weak_error(cfg, ctx):
    alphas = cfg.sweep.get("alphas", [cfg.solver["alpha"]])
    kinds = cfg.sweep.get("g_kinds", [cfg.problem.get("g_kind")])
    terminal = cfg.sweep.get("error") == "terminal"
    grid = list(cfg.solver["m_grid"])
    out = {}
    for kind in kinds:
        problem = cfg.build_problem(**({} if kind is None else {"g_kind": kind}))
        kind = kind or problem.g.kind
        phi = cfg.test_fn(problem)
        for alpha in alphas:
            pairs = []
            for m in grid:
                sc = cfg.solver_config(m=m, alpha=alpha)
                a = ctx.ensemble(f"admm_{kind}_a{alpha}_m{m}", AdmmRunner(problem, sc, phi))
                b = ctx.ensemble(f"sme_{kind}_a{alpha}_m{m}",
                                 SmeRunner(problem, cfg.sme_config(sc, problem), phi))
                if terminal:
                    a, b = _terminal_only(a), _terminal_only(b)
                pairs.append((a, b))
            rep = weak_error_report(grid, pairs)
            ctx.emit(f"weak_error_{kind}_a{_tag(alpha)}.csv",
                     {"m": np.array(grid), "err": rep.errs, "stderr": rep.stderrs})
            out[f"{kind}_a{alpha}"] = {"order": rep.slope, "order_stderr": rep.slope_ci,
                                       "errs": rep.errs}
    return out


def _terminal_only(st):
    # keep t = 0 and the final time so the max over k >= 1 is the terminal error
    idx = [0, len(st.ts) - 1]
    out = copy.copy(st)
    for key in ("ts", "mean_phi", "std_phi", "mean_x", "std_x"):
        setattr(out, key, getattr(st, key)[idx])
    return out


def _pipe_residual_scan(cfg, ctx):
    problem = cfg.build_problem()
    phi = cfg.test_fn(problem)
    T = cfg.solver["T"]
    exps = cfg.sweep.get("rho_exponents", [4, 5, 6, 7, 8, 9])
    out = {}
    for alpha in cfg.sweep.get("alphas", [cfg.solver["alpha"]]):
        entries = []
        for e in exps:
            rho = 2.0 ** e
            sc = cfg.solver_config(rho=rho, alpha=alpha, T=T)
            st = ctx.ensemble(f"residual_a{alpha}_rho{e}", AdmmRunner(problem, sc, phi))
            entries.append((rho, st))
            ctx.emit(f"residual_series_a{_tag(alpha)}_rho{e}.csv",
                     {"t": st.ts, "mean_r_norm": st.mean_r, "std_r_norm": st.std_r,
                      "mean_ra_norm": st.mean_ra, "std_ra_norm": st.std_ra})
        rep = residual_scaling(entries)
        ctx.emit(f"residual_a{_tag(alpha)}.csv",
                 {"rho": rep.rhos, "max_mean_r": rep.max_mean_r, "max_std_r": rep.max_std_r,
                  "max_mean_ra": rep.max_mean_ra, "max_std_ra": rep.max_std_ra})
        out[f"a{alpha}"] = {"rate_r": rep.rate_r, "rate_ra": rep.rate_ra,
                            "rate_std_r": rep.rate_std_r, "rate_std_ra": rep.rate_std_ra}
    return out


def _pipe_std_scan(cfg, ctx):
    problem = cfg.build_problem()
    phi = cfg.test_fn(problem)
    T = cfg.solver["T"]
    window = tuple(cfg.sweep.get("std_window", (0.2 * T, T)))
    which = cfg.sweep.get("which", ["x", "z"])
    out = {}
    for alpha in cfg.sweep.get("alphas", [cfg.solver["alpha"]]):
        entries = []
        for m in _grid_m(cfg):
            sc = cfg.solver_config(m=m, alpha=alpha)
            entries.append((sc.epsilon, ctx.ensemble(f"std_a{alpha}_m{m}",
                                                     AdmmRunner(problem, sc, phi))))
        cols, res = {}, {}
        for w in which:
            rep = std_scaling(entries, which=w, window=window)
            cols.setdefault("t", rep.times)
            for eps, curve in rep.curves.items():
                m = int(round(math.log2(T / eps)))
                cols[f"{w}_m{m}"] = curve
            res[f"max_gap_{w}"] = rep.max_gap
        ctx.emit(f"std_scan_a{_tag(alpha)}.csv", cols)
        out[f"a{alpha}"] = res
    return out


def reference_minimizer(problem):
    """Minimiser of ``V``: closed form for ridge, long gradient flow otherwise."""
    if hasattr(problem, "minimizer"):
        try:
            return problem.minimizer()
        except NotImplementedError:
            pass
    ref = gradient_flow_reference(problem, np.eye(problem.d), np.zeros(problem.d) + 1.0,
                                  T=40.0, dt=0.05, refine=8)
    return ref.Xs[-1]


def _pipe_alpha_scan(cfg, ctx):
    problem = cfg.build_problem()
    x_star = reference_minimizer(problem)
    cols, out = {}, {}
    for alpha in cfg.sweep.get("alphas", [0.5, 1.0, 1.5]):
        sc = cfg.solver_config(alpha=alpha)
        st = ctx.ensemble(f"alpha_a{alpha}", AdmmRunner(problem, sc))
        cols.setdefault("t", st.ts)
        err = st.mean_x - x_star
        cols[f"mean_err_a{_tag(alpha)}"] = np.linalg.norm(np.atleast_2d(err.T).T, axis=-1) \
            * np.sign(err[:, 0])
        cols[f"std_x_a{_tag(alpha)}"] = st.std_x[:, 0]
        out[f"a{alpha}"] = {"terminal_mean_err": float(cols[f"mean_err_a{_tag(alpha)}"][-1]),
                            "transition_time": transition_time(st, x_star)}
    ctx.emit("alpha_scan.csv", cols)
    out["x_star"] = np.asarray(x_star).tolist()
    return out


def _pipe_c_scan(cfg, ctx):
    problem = cfg.build_problem()
    x_star = reference_minimizer(problem)

    def dist(x):
        return np.linalg.norm(x - x_star, axis=-1)

    out = {"x_star": np.asarray(x_star).tolist()}
    for omega in cfg.sweep.get("omegas", [1.0, 0.0]):
        cols = {}
        for c in cfg.sweep.get("c_values", [0.15, 0.2, 0.5, 1.0]):
            sc = cfg.solver_config(omega=omega, c=c)
            lam = m_hat(sc, problem.A).min_eigenvalue
            st = ctx.ensemble(f"c_w{omega}_c{c}", AdmmRunner(problem, sc, dist),
                              allow_divergence=True)
            key = f"w{omega}_c{c}"
            out[key] = {"mhat_min_eigenvalue": lam,
                        "diverged": ctx.records[-1]["diverged"]}
            if st is not None:
                # an indefinite Mhat shows up as geometric growth of |x - x*|,
                # usually well before the divergence guard fires
                out[key]["terminal_mean_err"] = float(st.mean_phi[-1])
                cols.setdefault("t", st.ts)
                cols[f"mean_err_c{_tag(c)}"] = st.mean_phi
                cols[f"std_err_c{_tag(c)}"] = st.std_phi
        if cols:
            ctx.emit(f"c_scan_w{_tag(omega)}.csv", cols)
    return out


def _pipe_divergence(cfg, ctx):
    problem = cfg.build_problem()
    phi = cfg.test_fn(problem)
    rows = {"alpha": [], "m": [], "M": [], "diverged": []}
    for alpha in cfg.sweep.get("alphas", [cfg.solver["alpha"]]):
        for m in _grid_m(cfg):
            sc = cfg.solver_config(m=m, alpha=alpha)
            st = ctx.ensemble(f"div_a{alpha}_m{m}", AdmmRunner(problem, sc, phi),
                              allow_divergence=True)
            rec = ctx.records[-1]
            for k, v in (("alpha", alpha), ("m", m), ("M", rec["M"]), ("diverged", rec["diverged"])):
                rows[k].append(v)
            if st is not None:
                ctx.emit(f"divergence_a{_tag(alpha)}_m{m}.csv",
                         {"t": st.ts, "mean_phi": st.mean_phi, "std_phi": st.std_phi})
    ctx.emit("divergence.csv", rows)
    return {"diverged_fraction": [d / M for d, M in zip(rows["diverged"], rows["M"])]}


# ---------------------------------------------------------- schedule demo

def simulate_feedback_sme(problem, me, seeds, epsilon, sigma, window=10):
    """Coupled SME ensemble whose step scale is the feedback control.

    All paths share ``u_t = feedback_u(EV_t)``, with ``EV_t`` the smoothed
    ensemble mean of ``V``. Returns ``(EV, u)`` on the grid.
    """
    from .sme import _draw, _increment
    n, S, sub = len(seeds), me.steps, me.em_substeps
    eta, sn = _draw(problem, me, seeds, S * sub)
    X = np.tile(me.X0.reshape(problem.d), (n, 1))
    smooth = SmoothedEV(window)
    EV = np.empty(S + 1)
    us = np.empty(S + 1)
    EV[0] = smooth.update(problem.potential(X))
    us[0] = feedback_u(EV[0], epsilon, sigma)
    for k in range(S):
        u = us[k]
        step = copy.copy(me)
        step.step_scale = lambda t, u=u: u
        for j in range(sub):
            idx = k * sub + j
            X = X + _increment(problem, X, step, eta[:, idx],
                               None if sn is None else sn[:, idx], idx * me.h)
        EV[k + 1] = smooth.update(problem.potential(X))
        us[k + 1] = feedback_u(EV[k + 1], epsilon, sigma)
    return EV, us


def _pipe_schedule_demo(cfg, ctx):
    p = cfg.problem
    a, b, sigma = p.get("a", 1.0), p.get("b", 0.0), p.get("sigma", 1.0)
    problem = build_problem("quad1d", a=a, b=b, sigma=sigma)
    base = cfg.solver_config()
    eps, x0 = base.epsilon, float(base.x0[0] - b)
    c0 = base.c
    t_star = cfg.schedule.get("params", {}).get(
        "t_star", transition_time_closed_form(x0, sigma / c0, eps, a / c0))
    rate = cfg.schedule.get("params", {}).get("a", a / c0)
    V = make_test_fn("objective", problem)
    M = cfg.ensemble["M"]

    def grow(t):
        return open_loop_u(t, t_star, rate) ** -1

    # ADMM: constant c versus c_t = c0 (1 + a (t - t*))
    const = ctx.ensemble("admm_constant", AdmmRunner(problem, base, V))
    sched_cfg = cfg.solver_config(c_schedule=lambda t: c0 * grow(t))
    sched = ctx.ensemble("admm_open_loop", AdmmRunner(problem, sched_cfg, V))

    # SME: shrinking the step and growing Mhat give the same law
    me = cfg.sme_config(base, problem)
    by_step = copy.copy(me)
    by_step.step_scale = lambda t: open_loop_u(t, t_star, rate)
    by_mhat = copy.copy(me)
    by_mhat.mhat_scale = grow
    s_step = ctx.ensemble("sme_step_scale", SmeRunner(problem, by_step, V))
    s_mhat = ctx.ensemble("sme_mhat_scale", SmeRunner(problem, by_mhat, V))

    seed = ctx.next_seed()
    ctx.records.append({"label": "sme_feedback", "base_seed": seed, "M": M,
                        "seeds": derive_seeds(seed, M), "diverged": 0})
    window = cfg.schedule.get("params", {}).get("window", 10)
    EV_fb, u_fb = simulate_feedback_sme(problem, copy.copy(me), derive_seeds(seed, M),
                                        eps, sigma / c0, window)

    ts = const.ts
    B0 = int(cfg.schedule.get("params", {}).get("B0", 1))
    x_ts = x0 * math.exp(-a / c0 * t_star)
    cols = {
        "t": ts,
        "u_open_loop": [open_loop_u(t, t_star, rate) for t in ts],
        "u_feedback": u_fb,
        "B_t": [batch_growth(t, t_star, B0, sigma, eps, x_ts) for t in ts],
        "admm_EV_constant": const.mean_phi,
        "admm_EV_open_loop": sched.mean_phi,
        "sme_EV_step_scale": s_step.mean_phi,
        "sme_EV_mhat_scale": s_mhat.mean_phi,
        "sme_EV_feedback": EV_fb,
    }
    ctx.emit("schedule_demo.csv", cols)
    return {"t_star": t_star, "a": rate,
            "terminal_EV_constant": float(const.mean_phi[-1]),
            "terminal_EV_open_loop": float(sched.mean_phi[-1]),
            "terminal_EV_sme_step_scale": float(s_step.mean_phi[-1]),
            "terminal_EV_sme_mhat_scale": float(s_mhat.mean_phi[-1]),
            "terminal_EV_sme_feedback": float(EV_fb[-1])}


_PIPES = {
    "admm": _pipe_admm, "sme": _pipe_sme, "overlay": _pipe_overlay, "paths": _pipe_paths,
    "weak_error": _pipe_weak_error, "residual_scan": _pipe_residual_scan,
    "std_scan": _pipe_std_scan, "alpha_scan": _pipe_alpha_scan, "c_scan": _pipe_c_scan,
    "divergence": _pipe_divergence, "schedule_demo": _pipe_schedule_demo,
}


def run_experiment(config, out_dir=None, workers=1):
    """Execute ``config.pipeline`` and write its CSV files and manifest.

    Returns the :class:`~gsadmm.io.RunManifest`. File contents depend only
    on the config (including ``base_seed``), never on ``workers``.
    """
    if not isinstance(config, ExperimentConfig):
        config = ExperimentConfig.from_dict(config)
    out = Path(out_dir or config.outputs.get("directory", "out"))
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from exc

    started = _io.now_iso()
    t0 = time.perf_counter()
    ctx = _Context(config, workers)
    summary = _PIPES[config.pipeline](config, ctx)

    # single writer, after all ensembles are aggregated
    digests = {}
    for name in sorted(ctx.files):
        path = _io.emit_csv(ctx.files[name], out / name)
        digests[name] = _io.sha256_file(path)
    summary = _io._clean(summary)
    spath = out / "summary.json"
    with open(spath, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    digests["summary.json"] = _io.sha256_file(spath)

    manifest = _io.RunManifest(
        config=config.to_dict(), base_seed=ctx.base_seed, version=__version__,
        ensembles=ctx.records, outputs=digests, summary=summary,
        wall_clock=time.perf_counter() - t0, started=started)
    _io.write_manifest(manifest, out / "manifest.json")
    return manifest
