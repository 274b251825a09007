"""Forward model: state-dependent Boltzmann rationality over fixed-horizon paths.

A trajectory ``xi`` of ``T + 1`` states has score

    score(xi) = -sum_s beta(s) * cost(s) = -theta_b^T Phi_xi theta_r

with ``cost(s) = theta_r . phi(s)``, ``beta(s) = theta_b . phi(s)`` and the
feature-counts matrix ``Phi_xi = sum_s phi(s) phi(s)^T``. Probabilities are
per action sequence: ``P(a_1..a_T) = exp(score(xi(a))) / Z``, so aliased
actions at walls are counted with multiplicity and ``theta_b = 0`` is exactly
uniform over the ``5**T`` sequences.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .errors import DomainError, StaleBackupError, UnsupportedConfigurationError
from .gridworld import (
    GridSpec,
    Trajectory,
    action_multiplicity,
    canonical_actions,
    make_trajectory,
    validate_trajectory,
)


def _vec(v, name) -> np.ndarray:
    a = np.array(v, dtype=np.float64)
    if a.ndim != 1:
        raise DomainError(f"{name} must be a vector, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DomainError(f"{name} has non-finite entries: {a}")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class BsdrParams:
    """Reward weights ``theta_r`` and one agent's rationality weights ``theta_b``."""

    theta_r: np.ndarray
    theta_b: np.ndarray

    def __post_init__(self):
        tr = _vec(self.theta_r, "theta_r")
        tb = _vec(self.theta_b, "theta_b")
        if tr.shape != tb.shape:
            raise DomainError(f"theta_r has dim {tr.size} but theta_b has dim {tb.size}")
        object.__setattr__(self, "theta_r", tr)
        object.__setattr__(self, "theta_b", tb)

    @property
    def dim(self) -> int:
        return self.theta_r.size

    def key(self) -> tuple:
        return (self.theta_r.tobytes(), self.theta_b.tobytes())

    def __eq__(self, other):
        if not isinstance(other, BsdrParams):
            return NotImplemented
        return self.key() == other.key()

    def __hash__(self):
        return hash(self.key())

    def __repr__(self):
        return f"BsdrParams(theta_r={self.theta_r.tolist()}, theta_b={self.theta_b.tolist()})"


def _check_dim(params: BsdrParams, spec: GridSpec):
    if params.dim != spec.dim:
        raise DomainError(f"parameter dim {params.dim} does not match feature map {spec.feature_map!r} dim {spec.dim}")


@dataclass(frozen=True, eq=False)
class FeatureCounts:
    """Symmetric PSD matrix ``sum_s phi(s) phi(s)^T``."""

    matrix: np.ndarray

    def __add__(self, other: "FeatureCounts") -> "FeatureCounts":
        return FeatureCounts(self.matrix + other.matrix)

    def is_symmetric(self) -> bool:
        return bool(np.array_equal(self.matrix, self.matrix.T))

    def is_psd(self, floor: float = -1e-10) -> bool:
        return bool(np.linalg.eigvalsh(self.matrix).min() >= floor)


def outer_sum(phis, dim: Optional[int] = None) -> FeatureCounts:
    """``sum_k phi_k phi_k^T`` for rows ``phis``; empty input gives zeros."""
    F = np.asarray(phis, dtype=np.float64)
    if F.size == 0:
        if dim is None:
            raise DomainError("dimension required for an empty feature list")
        return FeatureCounts(np.zeros((dim, dim)))
    F = F.reshape(len(F), -1)
    M = F.T @ F
    # averaging with the transpose makes symmetry exact
    return FeatureCounts((M + M.T) / 2)


def state_cost(s, theta_r, spec: GridSpec) -> float:
    theta_r = np.asarray(theta_r, dtype=np.float64)
    if theta_r.shape != (spec.dim,):
        raise DomainError(f"theta_r shape {theta_r.shape} does not match feature dim {spec.dim}")
    return float(spec.features[spec.index_of(s)] @ theta_r)


def beta_of_state(s, theta_b, spec: GridSpec) -> float:
    theta_b = np.asarray(theta_b, dtype=np.float64)
    if theta_b.shape != (spec.dim,):
        raise DomainError(f"theta_b shape {theta_b.shape} does not match feature dim {spec.dim}")
    return float(spec.features[spec.index_of(s)] @ theta_b)


def state_log_weights(params: BsdrParams, spec: GridSpec) -> np.ndarray:
    """Per-state exponent contribution ``-beta(s) * cost(s)``."""
    _check_dim(params, spec)
    F = spec.features
    return -(F @ params.theta_b) * (F @ params.theta_r)


def feature_counts(xi: Trajectory, spec: GridSpec) -> FeatureCounts:
    idx = validate_trajectory(xi, spec, full_length=False)
    return outer_sum(spec.features[idx], spec.dim)


def traj_score(xi: Trajectory, params: BsdrParams, spec: GridSpec) -> float:
    """Exponent ``-theta_b^T Phi_xi theta_r`` (matrix form)."""
    _check_dim(params, spec)
    Phi = feature_counts(xi, spec).matrix
    return float(-(params.theta_b @ Phi @ params.theta_r))


def traj_score_per_state(xi: Trajectory, params: BsdrParams, spec: GridSpec) -> float:
    """Exponent ``-sum_s beta(s) cost(s)`` (per-state form)."""
    idx = validate_trajectory(xi, spec, full_length=False)
    return float(state_log_weights(params, spec)[idx].sum())


@dataclass(frozen=True, eq=False)
class SoftBackup:
    """Suffix log-partition table for one ``(params, spec)`` pair.

    ``log_suffix[t, i]`` is the log-sum over all continuations from state
    index ``i`` at time ``t`` of the exponentiated remaining score, including
    state ``i`` itself. ``log_z = log_suffix[0, start]``.
    """

    log_suffix: np.ndarray
    log_z: float
    log_weights: np.ndarray
    spec: GridSpec
    fingerprint: tuple

    def at(self, t: int, s) -> float:
        return float(self.log_suffix[t, self.spec.index_of(s)])


def _fingerprint(params: BsdrParams, spec: GridSpec) -> tuple:
    return (spec, params.key())


def log_partition(params: BsdrParams, spec: GridSpec) -> SoftBackup:
    """Exact log-partition by backward log-sum-exp over the horizon."""
    r = state_log_weights(params, spec)
    V = kernels.soft_backup(r, spec.succ, spec.horizon)
    V.setflags(write=False)
    r.setflags(write=False)
    return SoftBackup(V, float(V[0, spec.start_index]), r, spec, _fingerprint(params, spec))


def _check_backup(backup: SoftBackup, params: BsdrParams, spec: GridSpec):
    if backup.fingerprint != _fingerprint(params, spec):
        raise StaleBackupError("SoftBackup was computed for different parameters or spec")


def _ensure_backup(params, spec, backup):
    if backup is None:
        return log_partition(params, spec)
    _check_backup(backup, params, spec)
    return backup


def traj_log_prob(xi: Trajectory, params: BsdrParams, spec: GridSpec,
                  backup: Optional[SoftBackup] = None) -> float:
    """Log-probability of one action sequence producing ``xi``."""
    backup = _ensure_backup(params, spec, backup)
    idx = validate_trajectory(xi, spec)
    return float(backup.log_weights[idx].sum() - backup.log_z)


def state_sequence_log_prob(xi: Trajectory, params: BsdrParams, spec: GridSpec,
                            backup: Optional[SoftBackup] = None) -> float:
    """Log-probability of the state sequence, summing over aliased actions."""
    return traj_log_prob(xi, params, spec, backup) + float(np.log(action_multiplicity(xi, spec)))


def step_log_probs(xi: Trajectory, params: BsdrParams, spec: GridSpec,
                   backup: Optional[SoftBackup] = None) -> np.ndarray:
    """Conditional log-probability of each taken action, ``log P(a_t | s_t, t)``.

    Uses the recorded actions when present, otherwise the smallest action
    index producing each transition (aliased actions are equiprobable).
    """
    backup = _ensure_backup(params, spec, backup)
    idx = validate_trajectory(xi, spec)
    acts = np.asarray(xi.actions) if xi.actions is not None else canonical_actions(idx, spec)
    V = backup.log_suffix
    nxt = V[np.arange(1, spec.horizon + 1)[:, None], spec.succ[idx[:-1]]]
    m = nxt.max(axis=1)
    lse = m + np.log(np.exp(nxt - m[:, None]).sum(axis=1))
    return nxt[np.arange(spec.horizon), acts] - lse


def sample_paths(params: BsdrParams, spec: GridSpec, n: int, rng_seed,
                 backup: Optional[SoftBackup] = None):
    """``n`` exact samples as ``(actions, states)`` index arrays."""
    backup = _ensure_backup(params, spec, backup)
    rng = np.random.default_rng(rng_seed)
    u = rng.random((int(n), spec.horizon))
    return kernels.sample_paths(backup.log_suffix, spec.succ, spec.start_index, u)


def sample_trajectory(params: BsdrParams, spec: GridSpec, backup: Optional[SoftBackup] = None,
                      rng_seed=None, agent_id: Optional[str] = None) -> Trajectory:
    actions, states = sample_paths(params, spec, 1, rng_seed, backup)
    return make_trajectory(states[0], spec, actions[0], agent_id)


def sample_trajectories(params: BsdrParams, spec: GridSpec, n: int, rng_seed,
                        backup: Optional[SoftBackup] = None, agent_id: Optional[str] = None) -> list:
    actions, states = sample_paths(params, spec, n, rng_seed, backup)
    return [make_trajectory(s, spec, a, agent_id) for a, s in zip(actions, states)]


def expected_features(params: BsdrParams, spec: GridSpec, backup: Optional[SoftBackup] = None):
    """Model expectation of ``Phi_xi`` and the visitation table ``mu[t, i]``."""
    backup = _ensure_backup(params, spec, backup)
    mu = kernels.forward_occupancy(backup.log_suffix, backup.log_weights, spec.succ, spec.start_index)
    F = spec.features
    w = mu.sum(axis=0)
    M = F.T @ (w[:, None] * F)
    return FeatureCounts((M + M.T) / 2), mu


def bias_only(beta: float, dim: int) -> np.ndarray:
    v = np.zeros(dim)
    v[0] = beta
    return v


def require_bias(spec: GridSpec):
    if not spec.has_bias or not np.all(spec.features[:, 0] == 1.0):
        raise UnsupportedConfigurationError(
            f"feature map {spec.feature_map!r} has no constant bias component; constant-beta models need one"
        )


def br_params(theta_r, beta: float, spec: GridSpec) -> BsdrParams:
    require_bias(spec)
    return BsdrParams(theta_r, bias_only(beta, spec.dim))


def br_traj_log_prob(xi: Trajectory, theta_r, beta: float, spec: GridSpec) -> float:
    """Constant-beta Boltzmann rationality, ``P ~ exp(-beta * cost(xi))``.

    Works from the scalar ``beta`` and trajectory cost directly rather than
    through the bilinear form, so it can serve as a reference for BSDR with a
    bias-only ``theta_b``. Needs no bias feature.
    """
    if beta < 0:
        raise DomainError(f"beta must be >= 0, got {beta}")
    theta_r = np.asarray(theta_r, dtype=np.float64)
    if theta_r.shape != (spec.dim,):
        raise DomainError(f"theta_r shape {theta_r.shape} does not match feature dim {spec.dim}")
    cost = spec.features @ theta_r
    idx = validate_trajectory(xi, spec)
    V = kernels.soft_backup(-beta * cost, spec.succ, spec.horizon)
    return float(-beta * cost[idx].sum() - V[0, spec.start_index])


def optimal_policy(spec: GridSpec, theta_r) -> np.ndarray:
    """Deterministic minimum-cost policy ``policy[t, i]`` (action index).

    Ties within a relative 1e-12 of the best successor value go to the
    smallest action index.
    """
    theta_r = np.asarray(theta_r, dtype=np.float64)
    if theta_r.shape != (spec.dim,):
        raise DomainError(f"theta_r shape {theta_r.shape} does not match feature dim {spec.dim}")
    cost = spec.features @ theta_r
    tol = 1e-12 * max(1.0, float(np.abs(cost).max()) * (spec.horizon + 1))
    _, policy = kernels.hard_backup(cost, spec.succ, spec.horizon, tol)
    return policy


def rollout_policy(spec: GridSpec, policy: np.ndarray, agent_id=None) -> Trajectory:
    i = spec.start_index
    idx = [i]
    acts = []
    for t in range(spec.horizon):
        a = int(policy[t, i])
        i = int(spec.succ[i, a])
        acts.append(a)
        idx.append(i)
    return make_trajectory(idx, spec, acts, agent_id)


def trajectory_cost(xi: Trajectory, theta_r, spec: GridSpec) -> float:
    """Summed state cost ``sum_s theta_r . phi(s)`` over all T+1 states."""
    idx = validate_trajectory(xi, spec, full_length=False)
    return float((spec.features[idx] @ np.asarray(theta_r, dtype=np.float64)).sum())
