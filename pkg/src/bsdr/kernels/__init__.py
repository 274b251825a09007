"""Hot dynamic-programming kernels with a compiled core and numpy fallback.

The compiled extension is used when it imports; otherwise the pure numpy
module is selected. :func:`use_backend` switches explicitly (tests and the
benchmark compare both).
"""

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

_active = _ckernels if _ckernels is not None else _pykernels


def available_backends():
    return sorted(_BACKENDS)


def backend_name():
    return _active.NAME


def get_backend(name=None):
    if name is None:
        return _active
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} unavailable; have {available_backends()}") from None


def use_backend(name):
    """Select the kernel backend process-wide; returns the previous name."""
    global _active
    prev = _active.NAME
    _active = get_backend(name)
    return prev


def soft_backup(r, succ, horizon):
    return _active.soft_backup(r, succ, horizon)


def soft_backup_logz(R, succ, horizon, start):
    return _active.soft_backup_logz(R, succ, horizon, start)


def forward_occupancy(V, r, succ, start):
    return _active.forward_occupancy(V, r, succ, start)


def action_log_probs(V, succ, t, s):
    return _active.action_log_probs(V, succ, t, s)


def sample_paths(V, succ, start, uniforms):
    return _active.sample_paths(V, succ, start, uniforms)


def hard_backup(cost, succ, horizon, tie_tol=0.0):
    return _active.hard_backup(cost, succ, horizon, tie_tol)


__all__ = [
    "available_backends", "backend_name", "get_backend", "use_backend",
    "soft_backup", "soft_backup_logz", "forward_occupancy",
    "action_log_probs", "sample_paths", "hard_backup",
]
