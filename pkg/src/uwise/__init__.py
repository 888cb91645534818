"""U-statistic estimators of importance-weighted variational bounds.

The package averages the log-mean-exp kernel over collections of
size-``m`` subsets of ``n`` log-weights (disjoint blocks, all subsets,
random subsets, permuted blocks), provides sort-based lower
approximations, gradient estimators, Monte Carlo variance checks and an
SGD harness.
"""

from .core import LogWeights, kernel_h, log_sum_exp, sort_descending, weight_profile
from .estimator_spec import EstimatorSpec
from .estimators import (
    ObjectiveEstimate,
    approx_first_order,
    approx_second_order,
    complete_u,
    jackknife_first_order,
    standard_estimate,
    u_statistic,
)
from .rng import stream
from .subsets import (
    DEFAULT_CAP,
    CapExceededError,
    IndexSetCollection,
    all_subsets,
    disjoint_blocks,
    permuted_blocks,
    random_subsets,
)

__version__ = "0.1.0"

__all__ = [
    "LogWeights",
    "kernel_h",
    "log_sum_exp",
    "sort_descending",
    "weight_profile",
    "EstimatorSpec",
    "ObjectiveEstimate",
    "u_statistic",
    "standard_estimate",
    "complete_u",
    "approx_first_order",
    "approx_second_order",
    "jackknife_first_order",
    "stream",
    "DEFAULT_CAP",
    "CapExceededError",
    "IndexSetCollection",
    "all_subsets",
    "disjoint_blocks",
    "permuted_blocks",
    "random_subsets",
]
