"""Simulation-based bias correction of initial estimators.

The iterative bootstrap solves ``pi_hat = pi_star(theta)`` where ``pi_star``
averages the initial estimator over samples simulated at ``theta`` with
common random numbers.  One step of the iteration is the bootstrap bias
corrected estimator; the fixed point is the JINI estimator.
"""

from .bias_correct import Corrected, IbConfig, IbTrace, bbc, ib_solve, jini, pi_star
from .crn import CrnBank, RngStream, make_bank
from .errors import (
    InitialEstimatorFailure,
    InnerFitError,
    InvalidArgument,
    JiniError,
    NumericFailure,
    SimulationOverflow,
)
from .estimators import FitConfig, FitResult, initial_fitter
from .models import Box, Dataset, DesignMatrix, Family, ModelSpec, SyntheticBiasSpec

__all__ = [
    "Box", "Corrected", "CrnBank", "Dataset", "DesignMatrix", "Family", "FitConfig",
    "FitResult", "IbConfig", "IbTrace", "InitialEstimatorFailure", "InnerFitError",
    "InvalidArgument", "JiniError", "ModelSpec", "NumericFailure", "RngStream",
    "SimulationOverflow", "SyntheticBiasSpec", "bbc", "ib_solve", "initial_fitter",
    "jini", "make_bank", "pi_star",
]
