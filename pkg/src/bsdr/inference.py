"""Inverse inference of a shared reward and per-agent rationality weights.

Agents share ``theta_r`` and each has its own ``theta_b``. Trajectories are
independent given the parameters, so the dataset log-likelihood is

    sum_i [ -theta_b_i^T Phi_i theta_r - N_i log Z(theta_r, theta_b_i) ]

where ``Phi_i`` sums the feature-counts matrices of agent ``i``'s ``N_i``
trajectories. Both the grid posterior and :func:`mle_fit` use it in this form.
:func:`appendix_heuristic_fit` drops the ``log Z`` term on purpose and is kept
as a baseline only.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, Optional, Sequence

import numpy as np

from . import kernels
from .errors import (
    BudgetExceededError,
    DegenerateSolutionError,
    DivergedError,
    DomainError,
)
from .gridworld import GridSpec, Trajectory, validate_trajectory
from .model import (
    BsdrParams,
    FeatureCounts,
    _ensure_backup,
    expected_features,
    log_partition,
    outer_sum,
)

log = logging.getLogger(__name__)

DEFAULT_GRID_BUDGET = 10**6


# ---------------------------------------------------------------------------
# data and parameter containers


@dataclass(frozen=True, eq=False)
class Dataset:
    """Trajectories grouped by agent, all valid for ``spec``."""

    spec: GridSpec
    trajectories: Dict[str, tuple] = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for agent, trajs in self.trajectories.items():
            agent = str(agent)
            trajs = tuple(trajs)
            if not trajs:
                raise DomainError(f"agent {agent!r} has no trajectories")
            fixed = []
            for xi in trajs:
                validate_trajectory(xi, self.spec)
                if xi.agent_id != agent:
                    xi = Trajectory(xi.states, xi.actions, agent)
                fixed.append(xi)
            clean[agent] = tuple(fixed)
        object.__setattr__(self, "trajectories", clean)

    @classmethod
    def from_trajectories(cls, spec: GridSpec, trajs: Sequence[Trajectory]) -> "Dataset":
        groups: Dict[str, list] = {}
        for xi in trajs:
            if xi.agent_id is None:
                raise DomainError("trajectory without agent_id cannot be grouped")
            groups.setdefault(str(xi.agent_id), []).append(xi)
        return cls(spec, groups)

    @property
    def agents(self) -> list:
        return list(self.trajectories)

    def __len__(self):
        return sum(len(v) for v in self.trajectories.values())

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.spec == other.spec and list(self.trajectories.items()) == list(other.trajectories.items())

    def counts(self, agent) -> int:
        return len(self.trajectories[agent])

    @cached_property
    def agent_feature_counts(self) -> Dict[str, FeatureCounts]:
        """Per-agent ``Phi_i``, computed once."""
        F = self.spec.features
        out = {}
        for agent, trajs in self.trajectories.items():
            idx = np.concatenate([validate_trajectory(xi, self.spec) for xi in trajs])
            out[agent] = outer_sum(F[idx], self.spec.dim)
        return out

    def subset(self, agents) -> "Dataset":
        return Dataset(self.spec, {a: self.trajectories[a] for a in agents})

    def pooled(self, agent_id: str = "pooled") -> "Dataset":
        allt = [xi for trajs in self.trajectories.values() for xi in trajs]
        return Dataset(self.spec, {agent_id: allt} if allt else {})


@dataclass(frozen=True, eq=False)
class JointParams:
    """Shared ``theta_r`` plus ``theta_b`` per agent."""

    theta_r: np.ndarray
    theta_b_by_agent: Dict[str, np.ndarray]

    def __post_init__(self):
        tr = np.array(self.theta_r, dtype=np.float64)
        tb = {str(a): np.array(v, dtype=np.float64) for a, v in self.theta_b_by_agent.items()}
        for a, v in tb.items():
            if v.shape != tr.shape:
                raise DomainError(f"theta_b for agent {a!r} has shape {v.shape}, theta_r has {tr.shape}")
        if not np.all(np.isfinite(tr)) or not all(np.all(np.isfinite(v)) for v in tb.values()):
            raise DomainError("parameters must be finite")
        object.__setattr__(self, "theta_r", tr)
        object.__setattr__(self, "theta_b_by_agent", tb)

    @property
    def agents(self) -> list:
        return list(self.theta_b_by_agent)

    def for_agent(self, agent) -> BsdrParams:
        return BsdrParams(self.theta_r, self.theta_b_by_agent[agent])

    def to_dict(self) -> dict:
        return {
            "theta_r": self.theta_r.tolist(),
            "theta_b": {a: v.tolist() for a, v in self.theta_b_by_agent.items()},
        }

    def scaled(self, c: float) -> "JointParams":
        """Gauge transform ``(theta_r / c, c * theta_b)``."""
        return JointParams(self.theta_r / c, {a: c * v for a, v in self.theta_b_by_agent.items()})


PRIOR_KINDS = ("uniform_grid", "unit_sphere_uniform", "gaussian")


@dataclass(frozen=True)
class Prior:
    """Parameter prior.

    ``gaussian`` is an isotropic normal with scale ``sigma`` on ``theta_r``
    only; rationality weights are gauge-fixed or gridded instead.
    ``unit_sphere_uniform`` is uniform over unit-norm ``theta_r`` and unit-norm
    ``theta_b`` per agent, zero elsewhere. ``uniform_grid`` is flat.
    """

    kind: str = "uniform_grid"
    sigma: float = 10.0
    sphere_tol: float = 1e-9

    def __post_init__(self):
        if self.kind not in PRIOR_KINDS:
            raise DomainError(f"unknown prior kind {self.kind!r}; choose from {PRIOR_KINDS}")
        if self.kind == "gaussian" and not self.sigma > 0:
            raise DomainError(f"gaussian prior needs sigma > 0, got {self.sigma}")

    def log_density(self, theta_r: np.ndarray, theta_bs: Sequence[np.ndarray]) -> np.ndarray:
        """Vectorized log prior; ``theta_r`` is ``(..., D)``."""
        theta_r = np.asarray(theta_r, dtype=np.float64)
        if self.kind == "gaussian":
            D = theta_r.shape[-1]
            return (-0.5 * (theta_r**2).sum(-1) / self.sigma**2
                    - 0.5 * D * math.log(2 * math.pi * self.sigma**2))
        if self.kind == "unit_sphere_uniform":
            ok = np.abs(np.linalg.norm(theta_r, axis=-1) - 1.0) <= self.sphere_tol
            for tb in theta_bs:
                ok &= np.abs(np.linalg.norm(tb, axis=-1) - 1.0) <= self.sphere_tol
            return np.where(ok, 0.0, -np.inf)
        return np.zeros(theta_r.shape[:-1])

    def grad_theta_r(self, theta_r: np.ndarray) -> np.ndarray:
        if self.kind == "gaussian":
            return -theta_r / self.sigma**2
        return np.zeros_like(theta_r)


def _logsumexp(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x)
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.exp(x - m).sum()))


# ---------------------------------------------------------------------------
# likelihood


def _check_agents(data: Dataset, params: JointParams):
    if set(data.agents) != set(params.agents):
        raise DomainError(f"parameter agents {sorted(params.agents)} do not match dataset agents {sorted(data.agents)}")


def dataset_log_likelihood(data: Dataset, params: JointParams) -> float:
    """Sum of trajectory log-probabilities, each under its agent's ``theta_b``."""
    _check_agents(data, params)
    Phi = data.agent_feature_counts
    backups = {}
    total = 0.0
    for agent in data.agents:
        p = params.for_agent(agent)
        if p.key() not in backups:
            backups[p.key()] = log_partition(p, data.spec)
        log_z = backups[p.key()].log_z
        score = -(p.theta_b @ Phi[agent].matrix @ p.theta_r)
        total += score - data.counts(agent) * log_z
    return float(total)


# ---------------------------------------------------------------------------
# grid posterior


@dataclass
class GridAxes:
    """Discrete values per parameter coordinate.

    ``theta_r[k]`` lists candidate values for reward coordinate ``k``;
    ``theta_b[agent][k]`` those for the agent's rationality coordinate ``k``.
    The Cartesian grid is ordered ``theta_r`` coordinates first, then agents
    in insertion order.
    """

    theta_r: list
    theta_b: Dict[str, list]

    def __post_init__(self):
        self.theta_r = [np.asarray(v, dtype=np.float64) for v in self.theta_r]
        self.theta_b = {str(a): [np.asarray(v, dtype=np.float64) for v in ax] for a, ax in self.theta_b.items()}
        D = len(self.theta_r)
        for a, ax in self.theta_b.items():
            if len(ax) != D:
                raise DomainError(f"agent {a!r} has {len(ax)} rationality axes, expected {D}")

    @property
    def dim(self) -> int:
        return len(self.theta_r)

    @property
    def agents(self) -> list:
        return list(self.theta_b)

    @property
    def names(self) -> list:
        names = [f"theta_r[{k}]" for k in range(self.dim)]
        for a in self.agents:
            names += [f"theta_b[{a}][{k}]" for k in range(self.dim)]
        return names

    @property
    def values(self) -> list:
        vals = list(self.theta_r)
        for a in self.agents:
            vals += self.theta_b[a]
        return vals

    @property
    def shape(self) -> tuple:
        return tuple(len(v) for v in self.values)

    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 0

    def coords(self, flat_idx: np.ndarray):
        """``theta_r`` ``(n, D)`` and per-agent ``theta_b`` for flat indices."""
        multi = np.unravel_index(flat_idx, self.shape)
        vals = self.values
        cols = [vals[k][multi[k]] for k in range(len(vals))]
        D = self.dim
        theta_r = np.column_stack(cols[:D]) if D else np.zeros((len(flat_idx), 0))
        theta_b = {}
        for j, a in enumerate(self.agents):
            theta_b[a] = np.column_stack(cols[D * (j + 1): D * (j + 2)])
        return theta_r, theta_b

    def to_dict(self) -> dict:
        return {"theta_r": [v.tolist() for v in self.theta_r],
                "theta_b": {a: [v.tolist() for v in ax] for a, ax in self.theta_b.items()}}


@dataclass
class PosteriorGrid:
    """Normalized log-posterior over a Cartesian parameter grid."""

    axes: GridAxes
    log_post: np.ndarray
    normalizer: float

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_post)

    def map_index(self, tie_tol: float = 1e-9) -> tuple:
        """Highest-posterior point; near-ties (gauge copies) go to the smallest index."""
        flat = self.log_post.ravel()
        best = flat.max()
        first = int(np.flatnonzero(flat >= best - tie_tol)[0])
        return tuple(int(i) for i in np.unravel_index(first, self.log_post.shape))

    def params_at(self, index) -> JointParams:
        flat = np.ravel_multi_index(index, self.log_post.shape)
        tr, tb = self.axes.coords(np.array([flat]))
        return JointParams(tr[0], {a: v[0] for a, v in tb.items()})

    def map_params(self) -> JointParams:
        return self.params_at(self.map_index())

    def marginal(self, name: str):
        """``(values, probabilities)`` along one named axis."""
        k = self.axes.names.index(name)
        other = tuple(i for i in range(self.log_post.ndim) if i != k)
        return self.axes.values[k], self.probs.sum(axis=other)

    def mass(self, mask: np.ndarray) -> float:
        return float(self.probs[mask].sum())

    def gauge_class_mask(self, truth: JointParams, rtol: float = 1e-9) -> np.ndarray:
        """Grid points equal to ``truth`` up to ``(theta_r / c, c * theta_b)``, ``c > 0``."""
        G = self.axes.size()
        tr, tb = self.axes.coords(np.arange(G))
        agents = self.axes.agents
        B = np.concatenate([tb[a] for a in agents], axis=1) if agents else np.zeros((G, 0))
        B0 = np.concatenate([truth.theta_b_by_agent[a] for a in agents]) if agents else np.zeros(0)
        R0 = truth.theta_r
        atol = 1e-12
        if np.linalg.norm(B0) > 0:
            c = B @ B0 / (B0 @ B0)
            ok = c > 0
            with np.errstate(divide="ignore", invalid="ignore"):
                ok &= np.all(np.isclose(B, c[:, None] * B0, rtol=rtol, atol=atol), axis=1)
                ok &= np.all(np.isclose(tr * c[:, None], R0, rtol=rtol, atol=atol), axis=1)
        else:
            ok = np.all(np.abs(B) <= atol, axis=1)
            if np.linalg.norm(R0) > 0:
                c = tr @ R0 / (R0 @ R0)
                ok &= (c > 0) & np.all(np.isclose(tr, c[:, None] * R0, rtol=rtol, atol=atol), axis=1)
            else:
                ok &= np.all(np.abs(tr) <= atol, axis=1)
        return ok.reshape(self.log_post.shape)

    def to_dict(self) -> dict:
        idx = self.map_index()
        return {
            "axes": self.axes.to_dict(),
            "axis_names": self.axes.names,
            "log_normalizer": self.normalizer,
            "map_index": list(idx),
            "map_params": self.params_at(idx).to_dict(),
            "map_posterior": float(self.probs[idx]),
        }


def _grid_chunk_loglik(data: Dataset, axes: GridAxes, prior: Prior, flat_idx: np.ndarray) -> np.ndarray:
    spec = data.spec
    F = spec.features
    theta_r, theta_b = axes.coords(flat_idx)
    out = prior.log_density(theta_r, [theta_b[a] for a in axes.agents])
    live = np.isfinite(out)
    if not live.any():
        return out
    cost = theta_r[live] @ F.T
    Phi = data.agent_feature_counts
    for a in data.agents:
        tb = theta_b[a][live]
        R = -(tb @ F.T) * cost
        log_z = kernels.soft_backup_logz(R, spec.succ, spec.horizon, spec.start_index)
        score = -np.einsum("gi,ij,gj->g", tb, Phi[a].matrix, theta_r[live])
        out[live] += score - data.counts(a) * log_z
    return out


def grid_posterior(data: Dataset, axes: GridAxes, prior: Optional[Prior] = None,
                   max_points: int = DEFAULT_GRID_BUDGET, workers: int = 1,
                   chunk_size: int = 4096) -> PosteriorGrid:
    """Exact posterior on a Cartesian grid.

    Agents listed in ``axes`` but absent from ``data`` contribute no
    likelihood; every agent in ``data`` must have axes. Chunks of grid points
    are evaluated independently (``workers`` threads; the compiled kernel
    releases the GIL) and assembled in index order, so the result does not
    depend on ``workers``.
    """
    prior = prior or Prior("uniform_grid")
    missing = set(data.agents) - set(axes.agents)
    if missing:
        raise DomainError(f"no grid axes for agents {sorted(missing)}")
    if axes.dim != data.spec.dim:
        raise DomainError(f"grid has {axes.dim} coordinates per vector, feature map has {data.spec.dim}")
    G = axes.size()
    if G == 0:
        raise DomainError("parameter grid is empty")
    if G > max_points:
        raise BudgetExceededError(f"grid has {G} points, budget is {max_points}")
    chunks = [np.arange(i, min(i + chunk_size, G)) for i in range(0, G, chunk_size)]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda c: _grid_chunk_loglik(data, axes, prior, c), chunks))
    else:
        parts = [_grid_chunk_loglik(data, axes, prior, c) for c in chunks]
    unnorm = np.concatenate(parts)
    norm = _logsumexp(unnorm)
    if not np.isfinite(norm):
        raise DomainError("prior assigns zero mass to every grid point")
    return PosteriorGrid(axes, (unnorm - norm).reshape(axes.shape), norm)


# ---------------------------------------------------------------------------
# gradient-based maximum likelihood (log Z included)


GAUGES = ("unit_per_agent", "global", "none")


@dataclass
class OptConfig:
    """Settings for :func:`mle_fit` and :func:`fit_rationality`.

    ``gauge``: ``unit_per_agent`` keeps every ``||theta_b_i|| = 1`` (exact
    gauge fix for one agent, a constraint for several); ``global`` rescales
    all ``theta_b`` by one common factor folded into ``theta_r`` so the
    represented distributions never change; ``none`` leaves scale free.
    ``theta_b_mask`` freezes rationality coordinates that are ``False``.
    ``bb_steps`` starts each line search from the Barzilai-Borwein step
    (capped at ``max_step``) instead of doubling the last accepted step.
    ``nonneg_beta`` projects every ``theta_b`` onto the nonnegative orthant;
    all built-in feature maps are nonnegative, so this keeps ``beta(s) >= 0``.
    """

    step_size: float = 1.0
    max_iter: int = 5000
    tol: float = 1e-6
    gauge: str = "unit_per_agent"
    armijo_c: float = 1e-4
    backtrack: float = 0.5
    min_step: float = 1e-16
    bb_steps: bool = True
    max_step: float = 1e6
    theta_b_mask: Optional[Sequence[bool]] = None
    fit_theta_r: bool = True
    init_theta_r: Optional[Sequence[float]] = None
    init_theta_b: Optional[object] = None
    nonneg_beta: bool = False

    def __post_init__(self):
        if self.gauge not in GAUGES:
            raise DomainError(f"unknown gauge {self.gauge!r}; choose from {GAUGES}")
        if self.max_iter < 0 or not self.step_size > 0 or not self.tol >= 0:
            raise DomainError("step_size must be > 0, max_iter >= 0 and tol >= 0")


@dataclass
class FitResult:
    params: JointParams
    diagnostics: dict

    def to_dict(self) -> dict:
        return {"params": self.params.to_dict(), "diagnostics": self.diagnostics}


def default_theta_b(spec: GridSpec) -> np.ndarray:
    """Bias-only unit vector, or the normalized all-ones vector without a bias feature."""
    D = spec.dim
    if spec.has_bias:
        v = np.zeros(D)
        v[0] = 1.0
        return v
    return np.full(D, 1.0 / math.sqrt(D))


def negative_log_posterior(data: Dataset, params: JointParams, prior: Optional[Prior] = None) -> float:
    prior = prior or Prior("gaussian")
    lp = float(prior.log_density(params.theta_r, [params.theta_b_by_agent[a] for a in params.agents]))
    return -dataset_log_likelihood(data, params) - lp


def objective_and_gradient(data: Dataset, params: JointParams, prior: Optional[Prior] = None):
    """Negative log posterior and its gradient.

    Returns ``(f, grad_theta_r, {agent: grad_theta_b})`` with
    ``d/dtheta_r = sum_i (Phi_i - N_i E_i[Phi]) theta_b_i - dlogP`` and
    ``d/dtheta_b_i = (Phi_i - N_i E_i[Phi]) theta_r``.
    """
    prior = prior or Prior("gaussian")
    _check_agents(data, params)
    Phi = data.agent_feature_counts
    tr = params.theta_r
    f = -float(prior.log_density(tr, [params.theta_b_by_agent[a] for a in params.agents]))
    g_r = -prior.grad_theta_r(tr)
    g_b = {}
    for a in data.agents:
        p = params.for_agent(a)
        backup = log_partition(p, data.spec)
        EPhi, _ = expected_features(p, data.spec, backup)
        N = data.counts(a)
        resid = Phi[a].matrix - N * EPhi.matrix
        f += float(p.theta_b @ Phi[a].matrix @ tr) + N * backup.log_z
        g_r = g_r + resid @ p.theta_b
        g_b[a] = resid @ tr
    return f, g_r, g_b


def _armijo_descent(x0, fun, fun_grad, project, retract, cfg: OptConfig):
    """Projected/retracted gradient descent with backtracking line search.

    Trial steps follow Barzilai-Borwein (``bb_steps``); every accepted step
    satisfies the Armijo condition, so the objective trace is non-increasing.

    ``project(x, g)`` removes gradient directions the retraction undoes;
    ``retract(y)`` maps a trial point back onto the constraint set.
    """
    x = retract(np.array(x0, dtype=np.float64))
    f, g = fun_grad(x)
    trace = [f]
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise DivergedError("non-finite objective or gradient at initialization", trace)
    g = project(x, g)
    gnorm = float(np.linalg.norm(g))
    alpha = cfg.step_size
    status = "converged" if gnorm <= cfg.tol else "iteration_cap"
    it = 0
    while gnorm > cfg.tol and it < cfg.max_iter:
        it += 1
        accepted = False
        while alpha >= cfg.min_step:
            y = retract(x - alpha * g)
            fy = fun(y)
            if np.isfinite(fy) and fy <= f - cfg.armijo_c * alpha * gnorm**2:
                accepted = True
                break
            alpha *= cfg.backtrack
        if not accepted:
            status = "stalled"
            break
        x_prev, g_prev = x, g
        x = y
        f, g = fun_grad(x)
        if not np.isfinite(f) or not np.all(np.isfinite(g)):
            raise DivergedError(f"non-finite objective at iteration {it}", trace)
        trace.append(f)
        g = project(x, g)
        gnorm = float(np.linalg.norm(g))
        # Barzilai-Borwein trial step; Armijo still guards every accepted step
        s_, y_ = x - x_prev, g - g_prev
        sy = float(s_ @ y_)
        if cfg.bb_steps and sy > 0:
            alpha = min(float(s_ @ s_) / sy, cfg.max_step)
        else:
            alpha = min(alpha * 2.0, cfg.step_size)
        if gnorm <= cfg.tol:
            status = "converged"
    return x, {
        "objective_trace": trace,
        "grad_norm": gnorm,
        "iterations": it,
        "status": status,
        "converged": status == "converged",
        "warning": None if status == "converged" else status,
    }


def mle_fit(data: Dataset, prior: Optional[Prior] = None, opt_cfg: Optional[OptConfig] = None) -> FitResult:
    """Maximum a posteriori fit of ``theta_r`` and every ``theta_b_i`` with log Z.

    Gradient descent with Armijo backtracking on the negative log posterior.
    The accepted objective sequence is non-increasing. Hitting the iteration
    cap returns the last iterate with ``diagnostics['warning']`` set.
    """
    prior = prior or Prior("gaussian")
    cfg = opt_cfg or OptConfig()
    spec = data.spec
    agents = data.agents
    if not agents:
        raise DomainError("cannot fit an empty dataset")
    D = spec.dim
    K = len(agents)
    mask = np.ones(D, dtype=bool) if cfg.theta_b_mask is None else np.asarray(cfg.theta_b_mask, dtype=bool)
    if mask.shape != (D,):
        raise DomainError(f"theta_b_mask must have {D} entries")

    tr0 = np.zeros(D) if cfg.init_theta_r is None else np.asarray(cfg.init_theta_r, dtype=np.float64)
    if cfg.init_theta_b is None:
        tb0 = {a: default_theta_b(spec) for a in agents}
    elif isinstance(cfg.init_theta_b, dict):
        tb0 = {a: np.asarray(cfg.init_theta_b[a], dtype=np.float64) for a in agents}
    else:
        tb0 = {a: np.asarray(cfg.init_theta_b, dtype=np.float64) for a in agents}
    x0 = np.concatenate([tr0] + [tb0[a] for a in agents])

    def unpack(x):
        return JointParams(x[:D], {a: x[D * (j + 1): D * (j + 2)] for j, a in enumerate(agents)})

    def fun(x):
        try:
            return negative_log_posterior(data, unpack(x), prior)
        except DomainError:
            return np.inf

    def fun_grad(x):
        f, gr, gb = objective_and_gradient(data, unpack(x), prior)
        return f, np.concatenate([gr] + [gb[a] for a in agents])

    def blocks(x):
        return x[:D], x[D:].reshape(K, D)

    def project(x, g):
        g = g.copy()
        gr, gb = blocks(g)
        xr, xb = blocks(x)
        if not cfg.fit_theta_r:
            gr[:] = 0.0
        gb[:, ~mask] = 0.0
        if cfg.nonneg_beta:
            # active bounds: zero coordinates the step would push negative
            gb[(xb <= 0) & (gb > 0)] = 0.0
        if cfg.gauge == "unit_per_agent":
            for j in range(K):
                n2 = xb[j] @ xb[j]
                if n2 > 0:
                    gb[j] -= (gb[j] @ xb[j]) / n2 * xb[j]
            gb[:, ~mask] = 0.0
        elif cfg.gauge == "global" and cfg.fit_theta_r:
            # the scaling direction (theta_r, -theta_b) is undone by the retraction
            v = np.concatenate([xr, -xb.ravel()])
            v[D:].reshape(K, D)[:, ~mask] = 0.0
            vv = v @ v
            if vv > 0:
                g -= (g @ v) / vv * v
        return g

    def retract(x):
        x = x.copy()
        xr, xb = blocks(x)
        if cfg.nonneg_beta:
            np.maximum(xb, 0.0, out=xb)
        if cfg.gauge == "unit_per_agent":
            for j in range(K):
                n = np.linalg.norm(xb[j])
                if n > 0:
                    xb[j] /= n
        elif cfg.gauge == "global" and cfg.fit_theta_r:
            c = math.sqrt(float((xb**2).sum()) / K)
            if c > 0:
                xb /= c
                xr *= c
        return x

    x, diag = _armijo_descent(x0, fun, fun_grad, project, retract, cfg)
    params = unpack(x)
    diag.update({
        "method": "mle",
        "gauge": cfg.gauge,
        "log_likelihood": dataset_log_likelihood(data, params),
        "gauge_degenerate": K == 1 and cfg.fit_theta_r and bool(mask.any()),
    })
    return FitResult(params, diag)


def fit_rationality(groups: Sequence, theta_r, opt_cfg: Optional[OptConfig] = None) -> FitResult:
    """Fit one agent's ``theta_b`` with ``theta_r`` held fixed.

    ``groups`` is a sequence of ``(spec, trajectories)`` pairs sharing one
    feature dimension; each group contributes its own partition function
    (used when an agent was observed under several goal layouts).
    """
    cfg = opt_cfg or OptConfig(gauge="none", fit_theta_r=False)
    theta_r = np.asarray(theta_r, dtype=np.float64)
    groups = [(spec, list(trajs)) for spec, trajs in groups if len(trajs)]
    if not groups:
        raise DomainError("no trajectories to fit")
    D = groups[0][0].dim
    mask = np.ones(D, dtype=bool) if cfg.theta_b_mask is None else np.asarray(cfg.theta_b_mask, dtype=bool)
    stats = []
    for spec, trajs in groups:
        idx = np.concatenate([validate_trajectory(xi, spec) for xi in trajs])
        stats.append((spec, outer_sum(spec.features[idx], D).matrix, len(trajs)))

    def fun(tb):
        f = 0.0
        for spec, Phi, N in stats:
            p = BsdrParams(theta_r, tb)
            f += float(tb @ Phi @ theta_r) + N * log_partition(p, spec).log_z
        return f

    def fun_grad(tb):
        f = 0.0
        g = np.zeros(D)
        for spec, Phi, N in stats:
            p = BsdrParams(theta_r, tb)
            backup = log_partition(p, spec)
            E, _ = expected_features(p, spec, backup)
            f += float(tb @ Phi @ theta_r) + N * backup.log_z
            g += (Phi - N * E.matrix) @ theta_r
        return f, g

    def project(x, g):
        g = g.copy()
        g[~mask] = 0.0
        if cfg.nonneg_beta:
            g[(x <= 0) & (g > 0)] = 0.0
        return g

    def retract(y):
        return np.maximum(y, 0.0) if cfg.nonneg_beta else y

    x0 = default_theta_b(groups[0][0]) if cfg.init_theta_b is None else np.asarray(cfg.init_theta_b, dtype=np.float64)
    x, diag = _armijo_descent(x0, fun, fun_grad, project, retract, cfg)
    diag["method"] = "rationality_mle"
    return FitResult(JointParams(theta_r, {"agent": x}), diag)


# ---------------------------------------------------------------------------
# Z-free constrained heuristic


@dataclass
class AppendixConfig:
    """Projected gradient ascent settings for :func:`appendix_heuristic_fit`."""

    max_iter: int = 100_000
    tol: float = 1e-9
    rel_tol: float = 1e-14
    step_scale: float = 1.0
    init_theta_b: Optional[object] = None
    degenerate_tol: float = 1e-12


def _stacked_phi(data: Dataset):
    Phi = data.agent_feature_counts
    return [Phi[a].matrix for a in data.agents]


def closed_form_theta_r(data: Dataset, theta_b_by_agent: Dict[str, np.ndarray]) -> np.ndarray:
    """``-v / ||v||`` with ``v = sum_i Phi_i theta_b_i``."""
    v = sum(data.agent_feature_counts[a].matrix @ np.asarray(theta_b_by_agent[a], dtype=np.float64)
            for a in data.agents)
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise DegenerateSolutionError("sum_i Phi_i theta_b_i is zero; theta_r is undefined")
    return -v / n


def lagrange_residual(params: JointParams, data: Dataset) -> Dict[str, float]:
    """Per-agent norm of ``2 Phi_i^T v + 2 lambda_i theta_b_i`` at the best ``lambda_i``."""
    _check_agents(data, params)
    Phi = data.agent_feature_counts
    v = sum(Phi[a].matrix @ params.theta_b_by_agent[a] for a in data.agents)
    out = {}
    for a in data.agents:
        th = params.theta_b_by_agent[a]
        g = 2.0 * Phi[a].matrix.T @ v
        lam = -(th @ g) / (2.0 * (th @ th))
        out[a] = float(np.linalg.norm(g + 2.0 * lam * th))
    return out


def appendix_heuristic_fit(data: Dataset, opt_cfg: Optional[AppendixConfig] = None) -> FitResult:
    """Z-free constrained heuristic: maximize ``||sum_i Phi_i theta_b_i||^2``.

    Every ``theta_b_i`` is kept at unit norm by projected gradient ascent
    (Jacobi updates), then ``theta_r = -v / ||v||``. The partition function is
    left out of the objective, so this is not a consistent estimator.
    """
    cfg = opt_cfg or AppendixConfig()
    agents = data.agents
    if not agents:
        raise DomainError("cannot fit an empty dataset")
    spec = data.spec
    mats = _stacked_phi(data)
    if cfg.init_theta_b is None:
        th = np.stack([default_theta_b(spec) for _ in agents])
    elif isinstance(cfg.init_theta_b, dict):
        th = np.stack([np.asarray(cfg.init_theta_b[a], dtype=np.float64) for a in agents])
    else:
        th = np.stack([np.asarray(cfg.init_theta_b, dtype=np.float64) for _ in agents])
    th /= np.linalg.norm(th, axis=1, keepdims=True)

    lip = 2.0 * sum(np.linalg.norm(M, 2) for M in mats) ** 2
    eta = cfg.step_scale / lip if lip > 0 else 0.0
    scale = max(1.0, max(float(np.abs(M).max()) for M in mats))

    def direction(th):
        return sum(M @ t for M, t in zip(mats, th))

    def residuals(th, v):
        res, gnorm = [], 0.0
        for M, t in zip(mats, th):
            g = 2.0 * M.T @ v
            gnorm = max(gnorm, float(np.linalg.norm(g)))
            res.append(float(np.linalg.norm(g - (t @ g) * t)))
        return res, gnorm

    def done(res, gnorm):
        # residuals carry rounding noise proportional to the gradient scale
        return max(res) <= max(cfg.tol, cfg.rel_tol * gnorm)

    v = direction(th)
    trace = [float(v @ v)]
    res, gnorm = residuals(th, v)
    it = 0
    while not done(res, gnorm) and it < cfg.max_iter:
        it += 1
        grads = [2.0 * M.T @ v for M in mats]
        th = np.stack([t + eta * g for t, g in zip(th, grads)])
        th /= np.linalg.norm(th, axis=1, keepdims=True)
        v = direction(th)
        trace.append(float(v @ v))
        res, gnorm = residuals(th, v)
    if np.linalg.norm(v) <= cfg.degenerate_tol * scale:
        raise DegenerateSolutionError("heuristic converged to sum_i Phi_i theta_b_i = 0")
    theta_b = {a: th[j].copy() for j, a in enumerate(agents)}
    theta_r = closed_form_theta_r(data, theta_b)
    converged = done(res, gnorm)
    diag = {
        "method": "appendix_heuristic",
        "note": "log Z omitted from the objective; diagnostic baseline, not a consistent estimator",
        "objective_trace": trace,
        "residuals": dict(zip(agents, res)),
        "iterations": it,
        "converged": converged,
        "warning": None if converged else "iteration_cap",
    }
    return FitResult(JointParams(theta_r, theta_b), diag)


# ---------------------------------------------------------------------------
# prefixes and goals


def _prefix_indices(prefix, spec: GridSpec) -> np.ndarray:
    prefix = tuple(prefix)
    if len(prefix) > spec.horizon + 1:
        raise DomainError(f"prefix of {len(prefix)} states is longer than the horizon allows")
    return validate_trajectory(Trajectory(prefix), spec, full_length=False)


def prefix_log_likelihood(prefix, params: BsdrParams, spec: GridSpec, backup=None) -> float:
    """Log-probability that a trajectory begins with ``prefix`` (one action path).

    ``sum_{t<k} -beta(s_t) cost(s_t) + log_suffix[k][s_k] - log Z``.
    """
    backup = _ensure_backup(params, spec, backup)
    idx = _prefix_indices(prefix, spec)
    k = len(idx) - 1
    return float(backup.log_weights[idx[:-1]].sum() + backup.log_suffix[k, idx[-1]] - backup.log_z)


def _same_layout(a: GridSpec, b: GridSpec) -> bool:
    return (a.width, a.height, a.obstacles, a.start, a.horizon, a.feature_map) == \
           (b.width, b.height, b.obstacles, b.start, b.horizon, b.feature_map)


def goal_posterior(prefix, goal_candidates: Sequence[GridSpec], theta_b, theta_r_template,
                   prior: Optional[Sequence[float]] = None, backups: Optional[Sequence] = None) -> np.ndarray:
    """Posterior over goal layouts given an observed prefix.

    Each candidate is the same world with a different goal placement, so the
    feature map (and thus costs) differ while ``theta_b`` and the reward
    template stay fixed. ``backups`` may carry one precomputed SoftBackup per
    candidate.
    """
    goal_candidates = list(goal_candidates)
    if not goal_candidates:
        raise DomainError("goal candidate set is empty")
    base = goal_candidates[0]
    for g in goal_candidates[1:]:
        if not _same_layout(base, g):
            raise DomainError("goal candidates must share layout, start, horizon and feature map")
    n = len(goal_candidates)
    if prior is None:
        logprior = np.full(n, -math.log(n))
    else:
        pr = np.asarray(prior, dtype=np.float64)
        if pr.shape != (n,) or np.any(pr < 0) or pr.sum() <= 0:
            raise DomainError("goal prior must be a nonnegative vector with one entry per candidate")
        with np.errstate(divide="ignore"):
            logprior = np.log(pr / pr.sum())
    params = BsdrParams(theta_r_template, theta_b)
    if backups is None:
        backups = [None] * n
    elif len(backups) != n:
        raise DomainError("need one backup per goal candidate")
    ll = np.array([prefix_log_likelihood(prefix, params, spec, b) for spec, b in zip(goal_candidates, backups)])
    lp = ll + logprior
    return np.exp(lp - _logsumexp(lp))
