"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--size 12] [--horizon 20] [--repeat 5]

Prints best-of-``repeat`` wall time per kernel and the speedup, after checking
that both backends return the same numbers.
"""
import argparse
import timeit

import numpy as np

from bsdr import kernels
from bsdr.gridworld import GridSpec
from bsdr.model import BsdrParams, state_log_weights


def workloads(spec, batch, n_samples, rng):
    succ = spec.succ
    T = spec.horizon
    r = state_log_weights(BsdrParams([0.0, 1.0], [1.0, 5.0]), spec)
    R = -np.abs(rng.normal(size=(batch, spec.n_states)))
    u = rng.random((n_samples, T))
    cost = spec.features @ np.array([0.0, 1.0])
    return {
        "soft_backup": lambda k: k.soft_backup(r, succ, T),
        "soft_backup_logz": lambda k: k.soft_backup_logz(R, succ, T, spec.start_index),
        "forward_occupancy": lambda k: k.forward_occupancy(k.soft_backup(r, succ, T), r, succ, spec.start_index),
        "sample_paths": lambda k: k.sample_paths(k.soft_backup(r, succ, T), succ, spec.start_index, u),
        "hard_backup": lambda k: k.hard_backup(cost, succ, T, 0.0),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-12, atol=1e-12)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--size", type=int, default=12)
    ap.add_argument("--horizon", type=int, default=20)
    ap.add_argument("--batch", type=int, default=256, help="parameter points for soft_backup_logz")
    ap.add_argument("--samples", type=int, default=10000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    spec = GridSpec(args.size, args.size, (0, 0), [(args.size - 1, args.size - 1)], args.horizon)
    jobs = workloads(spec, args.batch, args.samples, np.random.default_rng(0))
    backends = kernels.available_backends()
    print(f"grid {args.size}x{args.size}, T={args.horizon}, backends: {', '.join(backends)}")
    if "cython" not in backends:
        print("compiled backend not built; only the numpy fallback is timed")
    print(f"{'kernel':<20}" + "".join(f"{b:>12}" for b in backends) + ("   speedup" if len(backends) > 1 else ""))
    for name, job in jobs.items():
        outs, times = {}, {}
        for b in backends:
            k = kernels.get_backend(b)
            outs[b] = job(k)
            times[b] = min(timeit.repeat(lambda: job(k), number=1, repeat=args.repeat))
        if len(backends) > 1 and not _same(outs["cython"], outs["python"]):
            raise SystemExit(f"{name}: backends disagree")
        line = f"{name:<20}" + "".join(f"{times[b] * 1e3:>10.3f}ms" for b in backends)
        if len(backends) > 1:
            line += f"{times['python'] / times['cython']:>9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
