"""Stability analysis and simulation of off-policy TD(0) on reversible chains."""

from .chains import (
    ChainError,
    MarkovChain,
    RatioTable,
    WeightedGraph,
    build_birth_death,
    build_graph_walk,
    build_simple_random_walk,
    has_reverse_support,
    is_reversible,
    perturb_graph_weights,
    perturbation_factor,
    same_structure,
    stationary_distribution,
    to_weighted_graph,
    transition_ratios,
)
from .simulate import SimulationTrace, StepSchedule, empirical_mean_Ab, sample_step, td0_run
from .stability import (
    FeatureSetup,
    StabilityReport,
    analyze,
    assemble_A_b,
    corollary1_bound,
    exact_value_function,
    is_negative_definite,
    lemma1_gamma_bounds,
    max_nd_gamma,
    projected_bellman_error,
    symmetrized_D,
    td_fixed_point,
    theorem2_bound,
)

__version__ = "0.1.0"
