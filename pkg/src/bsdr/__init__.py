"""Boltzmann state-dependent rationality.

A trajectory model where the inverse temperature varies with the state,
``beta(s) = theta_b . phi(s)``, plus exact inference for it on small
deterministic GridWorlds.
"""
from .errors import (
    BsdrError,
    BudgetExceededError,
    DegenerateSolutionError,
    DivergedError,
    DomainError,
    OracleSizeError,
    SchemaError,
    StaleBackupError,
    UnsupportedConfigurationError,
)
from .gridworld import GridSpec, State, Trajectory, enumerate_trajectories, featurize, neighbors
from .inference import (
    AppendixConfig,
    Dataset,
    GridAxes,
    JointParams,
    OptConfig,
    PosteriorGrid,
    Prior,
    appendix_heuristic_fit,
    dataset_log_likelihood,
    goal_posterior,
    grid_posterior,
    mle_fit,
    prefix_log_likelihood,
)
from .model import (
    BsdrParams,
    FeatureCounts,
    SoftBackup,
    expected_features,
    feature_counts,
    log_partition,
    sample_trajectory,
    step_log_probs,
    traj_log_prob,
    traj_score,
)

__version__ = "0.1.0"
