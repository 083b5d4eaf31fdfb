"""Variational interval bounds for sigmoid and noisy-OR belief networks."""

from .exact import (
    EnumerationTooLarge,
    MarginalResult,
    exact_log_marginal,
    kl_q_to_posterior,
    posterior_marginals,
    sigma_std,
)
from .lower import LowerBoundOptions, LowerBoundResult, entropy_q, lower_bound
from .network import (
    Network,
    NetworkError,
    NetworkKind,
    ancestral_sample,
    joint_log_prob,
    layer_evidence,
    load_network,
    save_network,
)
from .upper import UpperBoundOptions, UpperBoundResult, upper_bound

__version__ = "0.1.0"

__all__ = [
    "EnumerationTooLarge",
    "LowerBoundOptions",
    "LowerBoundResult",
    "MarginalResult",
    "Network",
    "NetworkError",
    "NetworkKind",
    "UpperBoundOptions",
    "UpperBoundResult",
    "ancestral_sample",
    "entropy_q",
    "exact_log_marginal",
    "joint_log_prob",
    "kl_q_to_posterior",
    "layer_evidence",
    "load_network",
    "lower_bound",
    "posterior_marginals",
    "save_network",
    "sigma_std",
    "upper_bound",
]
