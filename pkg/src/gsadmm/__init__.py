"""Generalized stochastic ADMM, its stochastic modified equation, and the
Monte Carlo harness that compares the two."""

__version__ = "0.1.0"

from .problem import (ProblemError, Regularizer, RegressionProblem, StochasticProblem,
                      ToyProblem, UnsupportedOperation, build_problem, quadratic_1d)
from .solver import (NewtonError, SingularSubproblem, SolverConfig, SolverState, Trajectory,
                     residuals, run_trajectory, step)
from .sme import IndefiniteMhat, NotPSD, SmeConfig, em_step, gradient_flow_reference, m_hat, psd_sqrt, run_sme
from .ensemble import (AdmmRunner, EmptyEnsemble, EnsembleStats, SmeRunner, convergence_order,
                       run_ensemble, split_seed, weak_error)

__all__ = [
    "ProblemError", "Regularizer", "RegressionProblem", "StochasticProblem", "ToyProblem",
    "UnsupportedOperation", "build_problem", "quadratic_1d",
    "NewtonError", "SingularSubproblem", "SolverConfig", "SolverState", "Trajectory",
    "residuals", "run_trajectory", "step",
    "IndefiniteMhat", "NotPSD", "SmeConfig", "em_step", "gradient_flow_reference", "m_hat",
    "psd_sqrt", "run_sme",
    "AdmmRunner", "EmptyEnsemble", "EnsembleStats", "SmeRunner", "convergence_order",
    "run_ensemble", "split_seed", "weak_error",
]
