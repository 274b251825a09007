"""Brute-force enumeration oracles for the dynamic-programming routines.

Everything here sums explicitly over all ``5**T`` action sequences, so it is
only usable on tiny worlds; that independence is the point. The
``oracle-check`` command and the test-suite share these functions.
"""
from __future__ import annotations

import itertools
import math

import numpy as np

from . import kernels
from .gridworld import DEFAULT_ORACLE_CAP, N_ACTIONS, GridSpec, enumerate_paths, make_trajectory
from .inference import prefix_log_likelihood
from .model import BsdrParams, expected_features, log_partition, step_log_probs, traj_log_prob

TOL = 1e-9


def _lse(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    m = x.max()
    return float(m + math.log(np.exp(x - m).sum()))


def path_scores(params: BsdrParams, spec: GridSpec, cap: int = DEFAULT_ORACLE_CAP):
    """Unnormalized log-weight of every action sequence, computed per path."""
    _, states = enumerate_paths(spec, cap)
    F = spec.features
    beta = F @ params.theta_b
    cost = F @ params.theta_r
    return -(beta[states] * cost[states]).sum(axis=1), states


def enum_log_z(params: BsdrParams, spec: GridSpec, cap: int = DEFAULT_ORACLE_CAP) -> float:
    scores, _ = path_scores(params, spec, cap)
    return _lse(scores)


def enum_expected_features(params: BsdrParams, spec: GridSpec, cap: int = DEFAULT_ORACLE_CAP) -> np.ndarray:
    scores, states = path_scores(params, spec, cap)
    p = np.exp(scores - _lse(scores))
    F = spec.features
    # Phi_xi = sum_t phi phi^T, weighted by P(xi)
    visits = np.zeros(spec.n_states)
    np.add.at(visits, states.ravel(), np.repeat(p, states.shape[1]))
    return F.T @ (visits[:, None] * F)


def enum_prefix_mass(params: BsdrParams, spec: GridSpec, k: int, backup=None) -> float:
    """Total probability of all ``5**k`` action prefixes of length ``k``."""
    succ = spec.succ
    cells = spec.cells
    total = 0.0
    for acts in itertools.product(range(N_ACTIONS), repeat=k):
        idx = [spec.start_index]
        for a in acts:
            idx.append(int(succ[idx[-1], a]))
        total += math.exp(prefix_log_likelihood([cells[i] for i in idx], params, spec, backup))
    return total


def random_spec(rng: np.random.Generator, max_w: int = 4, max_h: int = 4, max_T: int = 5,
                feature_maps=("bias_goal_dist", "one_hot", "goal_indicators")) -> GridSpec:
    """A random small world with a reachable layout (start and goals free cells)."""
    w = int(rng.integers(1, max_w + 1))
    h = int(rng.integers(1, max_h + 1))
    if w * h == 1:
        w = 2
    T = int(rng.integers(1, max_T + 1))
    cells = [(x, y) for y in range(h) for x in range(w)]
    order = rng.permutation(len(cells))
    start = cells[order[0]]
    n_goals = int(rng.integers(1, min(3, len(cells) - 1) + 1))
    goals = [cells[i] for i in order[1:1 + n_goals]]
    rest = [cells[i] for i in order[1 + n_goals:]]
    n_obs = int(rng.integers(0, len(rest) // 3 + 1)) if rest else 0
    obstacles = rest[:n_obs]
    fmap = str(feature_maps[int(rng.integers(len(feature_maps)))])
    return GridSpec(w, h, start, goals, T, obstacles, fmap)


def random_params(rng: np.random.Generator, spec: GridSpec, scale: float = 2.0) -> BsdrParams:
    D = spec.dim
    return BsdrParams(rng.normal(0.0, scale, D), rng.normal(0.0, scale, D))


def default_suite(seed: int = 0, n_specs: int = 8):
    """The 3x3, T=4 worlds ``oracle-check`` uses when no config is given."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
    specs = [
        GridSpec(3, 3, (0, 0), [(2, 2)], 4),
        GridSpec(3, 3, (1, 1), [(0, 2), (2, 0)], 4, obstacles=[(1, 0)]),
        GridSpec(3, 3, (0, 2), [(2, 0)], 4, feature_map="one_hot"),
        GridSpec(3, 3, (2, 2), [(0, 0), (2, 0)], 4, feature_map="goal_indicators"),
    ]
    while len(specs) < n_specs:
        specs.append(random_spec(rng, 3, 3, 4).with_horizon(4))
    return [(spec, random_params(rng, spec)) for spec in specs]


def check_instance(spec: GridSpec, params: BsdrParams, cap: int = DEFAULT_ORACLE_CAP, tol: float = TOL) -> dict:
    """Compare DP against enumeration on one world; returns errors per check."""
    backup = log_partition(params, spec)
    scores, states = path_scores(params, spec, cap)
    lz = _lse(scores)
    out = {"log_z_error": abs(backup.log_z - lz)}
    # normalization via the model's own trajectory log-probs
    actions, _ = enumerate_paths(spec, cap)
    logp = np.array([traj_log_prob(make_trajectory(s, spec, a), params, spec, backup)
                     for a, s in zip(actions, states)])
    out["normalization_error"] = abs(float(np.exp(logp).sum()) - 1.0)
    out["prefix_error"] = max(abs(enum_prefix_mass(params, spec, k, backup) - 1.0)
                              for k in range(1, spec.horizon + 1))
    E, _ = expected_features(params, spec, backup)
    Eo = enum_expected_features(params, spec, cap)
    out["expected_features_error"] = float(np.abs(E.matrix - Eo).max() / max(1.0, np.abs(Eo).max()))
    chain = 0.0
    for a, s in zip(actions[:200], states[:200]):
        xi = make_trajectory(s, spec, a)
        chain = max(chain, abs(float(step_log_probs(xi, params, spec, backup).sum())
                               - traj_log_prob(xi, params, spec, backup)))
    out["chain_rule_error"] = chain
    # every compiled/fallback backend must agree
    r = backup.log_weights
    V = backup.log_suffix
    parity = 0.0
    for name in kernels.available_backends():
        Vb = kernels.get_backend(name).soft_backup(np.ascontiguousarray(r), spec.succ, spec.horizon)
        parity = max(parity, float(np.abs(Vb - V).max()))
    out["backend_parity_error"] = parity
    out["passed"] = all(v < tol for k, v in out.items() if k.endswith("_error"))
    return out


def run_suite(instances, cap: int = DEFAULT_ORACLE_CAP, tol: float = TOL) -> list:
    rows = []
    for spec, params in instances:
        row = {"spec": spec.to_dict(), "theta_r": params.theta_r.tolist(), "theta_b": params.theta_b.tolist()}
        row.update(check_instance(spec, params, cap, tol))
        rows.append(row)
    return rows
