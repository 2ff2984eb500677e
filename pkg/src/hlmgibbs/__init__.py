"""Random-intercept linear models with missing cluster-level covariates.

Estimates a two-level random-intercept model where cluster-level continuous
and categorical covariates (with interactions) may be missing at random,
using a Gibbs sampler whose every update is an exact draw from a
closed-form full conditional.  Ships with a complete-data ML reference
fitter, convergence diagnostics, a Monte Carlo study harness and a CLI.
"""

__version__ = "0.1.0"

from .model import Dataset, ModelSpec, ParamState, PriorSpec
from .rng import RngHandle
from .sampler import ChainStore, SamplerConfig, run

__all__ = [
    "ChainStore",
    "Dataset",
    "ModelSpec",
    "ParamState",
    "PriorSpec",
    "RngHandle",
    "SamplerConfig",
    "run",
    "__version__",
]
