"""Both kernel backends against each other and against brute force."""
import subprocess
import sys

import numpy as np
import pytest
from scipy.special import logsumexp

from bsdr import kernels
from bsdr.gridworld import GridSpec, enumerate_paths

BACKENDS = kernels.available_backends()


def _world():
    return GridSpec(4, 3, (0, 1), [(3, 0)], 4, obstacles=[(1, 1)])


def test_python_backend_always_present():
    assert "python" in BACKENDS
    with pytest.raises(ValueError, match="unavailable"):
        kernels.get_backend("fortran")


def test_use_backend_restores(backend):
    assert kernels.backend_name() == backend
    prev = kernels.use_backend("python")
    assert prev == backend
    kernels.use_backend(prev)


def test_fallback_selected_without_extension():
    code = (
        "import sys; sys.modules['bsdr.kernels._ckernels'] = None\n"
        "from bsdr import kernels; print(kernels.backend_name(), kernels.available_backends())"
    )
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout
    assert out.split()[0] == "python"


@pytest.mark.parametrize("name", BACKENDS)
def test_soft_backup_matches_enumeration(name, rng):
    k = kernels.get_backend(name)
    spec = _world()
    r = rng.normal(size=spec.n_states)
    V = k.soft_backup(r, spec.succ, spec.horizon)
    _, states = enumerate_paths(spec)
    assert V[0, spec.start_index] == pytest.approx(logsumexp(r[states].sum(1)), abs=1e-12)
    R = rng.normal(size=(7, spec.n_states)) * 3
    lz = k.soft_backup_logz(R, spec.succ, spec.horizon, spec.start_index)
    np.testing.assert_allclose(lz, logsumexp(R[:, states].sum(2), axis=1), atol=1e-12)


@pytest.mark.parametrize("name", BACKENDS)
def test_occupancy_matches_enumeration(name, rng):
    k = kernels.get_backend(name)
    spec = _world()
    r = rng.normal(size=spec.n_states)
    V = k.soft_backup(r, spec.succ, spec.horizon)
    mu = k.forward_occupancy(V, r, spec.succ, spec.start_index)
    _, states = enumerate_paths(spec)
    w = r[states].sum(1)
    p = np.exp(w - logsumexp(w))
    for t in range(spec.horizon + 1):
        expect = np.bincount(states[:, t], weights=p, minlength=spec.n_states)
        np.testing.assert_allclose(mu[t], expect, atol=1e-13)


@pytest.mark.parametrize("name", BACKENDS)
def test_hard_backup_is_minimum_over_paths(name, rng):
    k = kernels.get_backend(name)
    spec = _world()
    cost = rng.normal(size=spec.n_states)
    W, policy = k.hard_backup(cost, spec.succ, spec.horizon, 0.0)
    acts, states = enumerate_paths(spec)
    totals = cost[states].sum(1)
    assert W[0, spec.start_index] == pytest.approx(totals.min(), abs=1e-12)
    # rolling out the policy attains the minimum
    i, c = spec.start_index, cost[spec.start_index]
    for t in range(spec.horizon):
        i = spec.succ[i, policy[t, i]]
        c += cost[i]
    assert c == pytest.approx(totals.min(), abs=1e-12)


def test_hard_backup_ties_go_to_smallest_action():
    spec = GridSpec(3, 3, (1, 1), [(2, 2)], 2)
    W, policy = kernels.hard_backup(np.zeros(spec.n_states), spec.succ, 2, 0.0)
    assert (policy == 0).all()


@pytest.mark.parametrize("name", BACKENDS)
def test_sampler_inverse_cdf(name):
    k = kernels.get_backend(name)
    spec = GridSpec(3, 3, (1, 1), [(2, 2)], 1)
    V = np.zeros((2, spec.n_states))  # uniform over the five actions
    u = np.array([[0.0], [0.19], [0.2], [0.59], [0.61], [0.999999]])
    acts, states = k.sample_paths(V, spec.succ, spec.start_index, u)
    assert acts[:, 0].tolist() == [0, 0, 1, 2, 3, 4]
    assert (states[:, 1] == spec.succ[spec.start_index, acts[:, 0]]).all()


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled backend not built")
class TestParity:
    def test_all_kernels_agree(self, rng):
        c, p = kernels.get_backend("cython"), kernels.get_backend("python")
        spec = GridSpec(6, 5, (0, 0), [(5, 4)], 9, obstacles=[(2, 2), (3, 1)])
        for scale in (0.1, 1.0, 50.0, 1e4):
            r = rng.normal(size=spec.n_states) * scale
            Vc, Vp = c.soft_backup(r, spec.succ, 9), p.soft_backup(r, spec.succ, 9)
            np.testing.assert_allclose(Vc, Vp, rtol=1e-13, atol=1e-12)
            np.testing.assert_allclose(c.forward_occupancy(Vp, r, spec.succ, 0),
                                       p.forward_occupancy(Vp, r, spec.succ, 0), atol=1e-13)
            R = rng.normal(size=(5, spec.n_states)) * scale
            np.testing.assert_allclose(c.soft_backup_logz(R, spec.succ, 9, 0),
                                       p.soft_backup_logz(R, spec.succ, 9, 0), rtol=1e-13, atol=1e-12)
            u = rng.random((200, 9))
            for x, y in zip(c.sample_paths(Vp, spec.succ, 0, u), p.sample_paths(Vp, spec.succ, 0, u)):
                np.testing.assert_array_equal(x, y)
            for x, y in zip(c.hard_backup(r, spec.succ, 9, 1e-9), p.hard_backup(r, spec.succ, 9, 1e-9)):
                np.testing.assert_allclose(x, y, atol=1e-9)
            np.testing.assert_allclose(c.action_log_probs(Vp, spec.succ, 3, 7),
                                       p.action_log_probs(Vp, spec.succ, 3, 7), atol=1e-14)

    def test_underflow_fallback_keeps_precision(self):
        # every successor of cell 2 sits ~2000 nats below the row maximum
        spec = GridSpec(6, 1, (0, 0), [(5, 0)], 3)
        r = np.array([0.0, -2000.0, -2000.0, -2000.0, 0.0, 5.0])
        c, p = kernels.get_backend("cython"), kernels.get_backend("python")
        np.testing.assert_allclose(c.soft_backup(r, spec.succ, 3), p.soft_backup(r, spec.succ, 3), rtol=1e-14)
