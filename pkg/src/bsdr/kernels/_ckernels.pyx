# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled dynamic-programming kernels (see ``_pykernels`` for the reference)."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log
from libc.stdint cimport int64_t

cnp.import_array()

NAME = "cython"

cdef enum:
    NACT = 5


cdef inline double _lse_succ(const double* v, const int64_t* row) noexcept nogil:
    """log-sum-exp of ``v`` over the five successors listed in ``row``."""
    cdef double m = v[row[0]]
    cdef double acc = 0.0
    cdef Py_ssize_t a
    for a in range(1, NACT):
        if v[row[a]] > m:
            m = v[row[a]]
    for a in range(NACT):
        acc += exp(v[row[a]] - m)
    return m + log(acc)


# Below this, a successor sum computed against the row max is recomputed
# against the local max so deeply negative values keep full precision.
cdef double _UNDERFLOW = 1e-250


cdef void _backup_step(const double* r, const double* v, const int64_t* succ, double* out,
                       double* e, Py_ssize_t n) noexcept nogil:
    """One backward step ``out[s] = r[s] + lse_a v[succ[s, a]]``.

    Exponentiates each ``v`` once against the row maximum, instead of five
    times per state.
    """
    cdef double M = v[0]
    cdef double acc
    cdef Py_ssize_t s, a
    for s in range(1, n):
        if v[s] > M:
            M = v[s]
    for s in range(n):
        e[s] = exp(v[s] - M)
    for s in range(n):
        acc = 0.0
        for a in range(NACT):
            acc += e[succ[s * NACT + a]]
        if acc > _UNDERFLOW:
            out[s] = r[s] + M + log(acc)
        else:
            out[s] = r[s] + _lse_succ(v, &succ[s * NACT])


cdef void _backup_rows(const double[::1] r, const int64_t[:, ::1] succ,
                       double[:, ::1] V, Py_ssize_t horizon, double* e) noexcept nogil:
    cdef Py_ssize_t n = r.shape[0]
    cdef Py_ssize_t t, s
    for s in range(n):
        V[horizon, s] = r[s]
    for t in range(horizon - 1, -1, -1):
        _backup_step(&r[0], &V[t + 1, 0], &succ[0, 0], &V[t, 0], e, n)


def soft_backup(r, succ, Py_ssize_t horizon):
    cdef const double[::1] rv = np.ascontiguousarray(r, dtype=np.float64)
    cdef const int64_t[:, ::1] sv = np.ascontiguousarray(succ, dtype=np.int64)
    out = np.empty((horizon + 1, rv.shape[0]))
    cdef double[:, ::1] V = out
    scratch = np.empty(rv.shape[0])
    cdef double[::1] e = scratch
    with nogil:
        _backup_rows(rv, sv, V, horizon, &e[0])
    return out


def soft_backup_logz(R, succ, Py_ssize_t horizon, Py_ssize_t start):
    cdef const double[:, ::1] Rv = np.ascontiguousarray(R, dtype=np.float64)
    cdef const int64_t[:, ::1] sv = np.ascontiguousarray(succ, dtype=np.int64)
    cdef Py_ssize_t G = Rv.shape[0]
    cdef Py_ssize_t n = Rv.shape[1]
    out = np.empty(G)
    cdef double[::1] logz = out
    buf = np.empty((3, n))
    cdef double[:, ::1] B = buf
    cdef Py_ssize_t g, t, s, cur
    if n == 0:
        return out
    with nogil:
        for g in range(G):
            for s in range(n):
                B[0, s] = Rv[g, s]
            cur = 0
            for t in range(horizon):
                _backup_step(&Rv[g, 0], &B[cur, 0], &sv[0, 0], &B[1 - cur, 0], &B[2, 0], n)
                cur = 1 - cur
            logz[g] = B[cur, start]
    return out


def forward_occupancy(V, r, succ, Py_ssize_t start):
    cdef const double[:, ::1] Vv = np.ascontiguousarray(V, dtype=np.float64)
    cdef const int64_t[:, ::1] sv = np.ascontiguousarray(succ, dtype=np.int64)
    cdef Py_ssize_t horizon = Vv.shape[0] - 1
    cdef Py_ssize_t n = Vv.shape[1]
    out = np.zeros((horizon + 1, n))
    cdef double[:, ::1] mu = out
    cdef Py_ssize_t t, s, a
    cdef double norm
    mu[0, start] = 1.0
    with nogil:
        for t in range(horizon):
            for s in range(n):
                if mu[t, s] == 0.0:
                    continue
                norm = _lse_succ(&Vv[t + 1, 0], &sv[s, 0])
                for a in range(NACT):
                    mu[t + 1, sv[s, a]] += mu[t, s] * exp(Vv[t + 1, sv[s, a]] - norm)
    return out


def action_log_probs(V, succ, Py_ssize_t t, Py_ssize_t s):
    cdef const double[:, ::1] Vv = np.ascontiguousarray(V, dtype=np.float64)
    cdef const int64_t[:, ::1] sv = np.ascontiguousarray(succ, dtype=np.int64)
    out = np.empty(NACT)
    cdef double[::1] lp = out
    cdef double norm = _lse_succ(&Vv[t + 1, 0], &sv[s, 0])
    cdef Py_ssize_t a
    for a in range(NACT):
        lp[a] = Vv[t + 1, sv[s, a]] - norm
    return out


def sample_paths(V, succ, Py_ssize_t start, uniforms):
    cdef const double[:, ::1] Vv = np.ascontiguousarray(V, dtype=np.float64)
    cdef const int64_t[:, ::1] sv = np.ascontiguousarray(succ, dtype=np.int64)
    cdef const double[:, ::1] U = np.ascontiguousarray(uniforms, dtype=np.float64)
    cdef Py_ssize_t N = U.shape[0]
    cdef Py_ssize_t horizon = U.shape[1]
    states_arr = np.empty((N, horizon + 1), dtype=np.int64)
    actions_arr = np.empty((N, horizon), dtype=np.int64)
    cdef int64_t[:, ::1] states = states_arr
    cdef int64_t[:, ::1] actions = actions_arr
    cdef double cdf[NACT]
    cdef double m, target
    cdef Py_ssize_t i, t, a, cur, chosen
    with nogil:
        for i in range(N):
            cur = start
            states[i, 0] = cur
            for t in range(horizon):
                m = Vv[t + 1, sv[cur, 0]]
                for a in range(1, NACT):
                    if Vv[t + 1, sv[cur, a]] > m:
                        m = Vv[t + 1, sv[cur, a]]
                cdf[0] = exp(Vv[t + 1, sv[cur, 0]] - m)
                for a in range(1, NACT):
                    cdf[a] = cdf[a - 1] + exp(Vv[t + 1, sv[cur, a]] - m)
                target = U[i, t] * cdf[NACT - 1]
                chosen = 0
                for a in range(NACT):
                    if cdf[a] <= target:
                        chosen += 1
                if chosen > NACT - 1:
                    chosen = NACT - 1
                actions[i, t] = chosen
                cur = sv[cur, chosen]
                states[i, t + 1] = cur
    return actions_arr, states_arr


def hard_backup(cost, succ, Py_ssize_t horizon, double tie_tol):
    cdef const double[::1] c = np.ascontiguousarray(cost, dtype=np.float64)
    cdef const int64_t[:, ::1] sv = np.ascontiguousarray(succ, dtype=np.int64)
    cdef Py_ssize_t n = c.shape[0]
    W_arr = np.empty((horizon + 1, n))
    pol_arr = np.empty((horizon, n), dtype=np.int64)
    cdef double[:, ::1] W = W_arr
    cdef int64_t[:, ::1] pol = pol_arr
    cdef Py_ssize_t t, s, a
    cdef double best, q
    with nogil:
        for s in range(n):
            W[horizon, s] = c[s]
        for t in range(horizon - 1, -1, -1):
            for s in range(n):
                best = W[t + 1, sv[s, 0]]
                for a in range(1, NACT):
                    q = W[t + 1, sv[s, a]]
                    if q < best:
                        best = q
                for a in range(NACT):
                    if W[t + 1, sv[s, a]] <= best + tie_tol:
                        pol[t, s] = a
                        break
                W[t, s] = c[s] + best
    return W_arr, pol_arr
