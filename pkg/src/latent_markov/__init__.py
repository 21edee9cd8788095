"""Time-varying Markov compartment models observed through aggregated frequencies."""
from .kernels import BACKEND
from .markov_core import (
    AggregationMatrix,
    ModelDomainError,
    SimplexError,
    StateSpace,
    TrajectoryPanel,
    TransitionModel,
    autocovariance,
    bayes_step,
    constant_model,
    empirical_frequencies,
    propagate,
    simulate_panel,
    stationary_distribution,
)

__version__ = "0.1.0"
