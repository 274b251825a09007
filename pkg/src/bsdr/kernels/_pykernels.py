"""Pure numpy implementations of the dynamic-programming kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature
and the same floating-point operation order where practical.
"""
import numpy as np

NAME = "python"


def _lse5(x):
    # log-sum-exp over the trailing (action) axis, max-shifted
    m = x.max(axis=-1)
    return m + np.log(np.exp(x - m[..., None]).sum(axis=-1))


def soft_backup(r, succ, horizon):
    """Backward log-sum-exp recursion.

    Returns an array ``V`` of shape ``(horizon + 1, n_states)`` with
    ``V[T] = r`` and ``V[t] = r + logsumexp_a V[t + 1][succ[:, a]]``.
    """
    r = np.ascontiguousarray(r, dtype=np.float64)
    succ = np.ascontiguousarray(succ, dtype=np.int64)
    V = np.empty((horizon + 1, r.shape[0]))
    V[horizon] = r
    for t in range(horizon - 1, -1, -1):
        V[t] = r + _lse5(V[t + 1][succ])
    return V


def soft_backup_logz(R, succ, horizon, start):
    """Log-partition for many state-weight vectors at once.

    ``R`` has shape ``(G, n_states)``; returns ``log_z`` of shape ``(G,)``.
    """
    R = np.ascontiguousarray(R, dtype=np.float64)
    succ = np.ascontiguousarray(succ, dtype=np.int64)
    V = R.copy()
    for _ in range(horizon):
        V = R + _lse5(V[:, succ])
    return V[:, start].copy()


def forward_occupancy(V, r, succ, start):
    """Propagate state occupancy forward under the soft-optimal policy."""
    V = np.ascontiguousarray(V, dtype=np.float64)
    succ = np.ascontiguousarray(succ, dtype=np.int64)
    horizon = V.shape[0] - 1
    n = V.shape[1]
    mu = np.zeros((horizon + 1, n))
    mu[0, start] = 1.0
    for t in range(horizon):
        nxt = V[t + 1][succ]
        logp = nxt - _lse5(nxt)[:, None]
        flow = mu[t][:, None] * np.exp(logp)
        np.add.at(mu[t + 1], succ.ravel(), flow.ravel())
    return mu


def action_log_probs(V, succ, t, s):
    """Log-probabilities of the five actions at ``(t, s)``."""
    nxt = V[t + 1][succ[s]]
    return nxt - _lse5(nxt)


def sample_paths(V, succ, start, uniforms):
    """Ancestral sampling by inverse CDF over the five actions.

    ``uniforms`` has shape ``(N, horizon)``; returns ``(actions, states)`` with
    shapes ``(N, horizon)`` and ``(N, horizon + 1)``.
    """
    V = np.ascontiguousarray(V, dtype=np.float64)
    succ = np.ascontiguousarray(succ, dtype=np.int64)
    uniforms = np.asarray(uniforms, dtype=np.float64)
    N, horizon = uniforms.shape
    states = np.empty((N, horizon + 1), dtype=np.int64)
    actions = np.empty((N, horizon), dtype=np.int64)
    states[:, 0] = start
    for t in range(horizon):
        cur = states[:, t]
        nxt = V[t + 1][succ[cur]]
        p = np.exp(nxt - nxt.max(axis=1, keepdims=True))
        cdf = np.cumsum(p, axis=1)
        target = uniforms[:, t] * cdf[:, -1]
        a = (cdf <= target[:, None]).sum(axis=1)
        a = np.minimum(a, 4)
        actions[:, t] = a
        states[:, t + 1] = succ[cur, a]
    return actions, states


def hard_backup(cost, succ, horizon, tie_tol):
    """Finite-horizon minimum-cost value iteration.

    Returns ``(W, policy)``: ``W[t][s]`` is the least cost-to-go including
    ``s`` itself, ``policy[t][s]`` the smallest action index within
    ``tie_tol`` of the best successor value.
    """
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    succ = np.ascontiguousarray(succ, dtype=np.int64)
    n = cost.shape[0]
    W = np.empty((horizon + 1, n))
    policy = np.empty((horizon, n), dtype=np.int64)
    W[horizon] = cost
    for t in range(horizon - 1, -1, -1):
        q = W[t + 1][succ]
        best = q.min(axis=1)
        policy[t] = np.argmax(q <= (best + tie_tol)[:, None], axis=1)
        W[t] = cost + best
    return W, policy
