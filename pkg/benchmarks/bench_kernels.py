"""Numba kernels vs their pure-numpy fallbacks on batched pose arrays.

Usage: python benchmarks/bench_kernels.py [--poses N] [--repeat R]

Both backends are imported side by side (``replift.kernels.NUMBA`` and
``replift.kernels.NUMPY``), so the env flag does not matter here. The
numba column excludes compilation; the first call is made before timing.
"""

import argparse
import time

import numpy as np

from replift import kernels
from replift.skeleton import DEFAULT_SKELETON


def _time(fn, repeat):
    fn()  # compile / warm caches
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--poses", type=int, default=10_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    spec = DEFAULT_SKELETON
    X = rng.normal(size=(args.poses, 3, spec.n_joints)) * 300.0
    Y = X + rng.normal(size=X.shape) * 20.0
    r, t = spec.r_idx, spec.t_idx
    B = kernels.NUMPY.bone_vectors(X, r, t)

    cases = {
        "bone_vectors": lambda ns: ns.bone_vectors(X, r, t),
        "kcs": lambda ns: ns.kcs(B),
        "bone_lengths": lambda ns: ns.bone_lengths(X, r, t),
        "joint_distances": lambda ns: ns.joint_distances(X, Y),
        "procrustes": lambda ns: ns.procrustes(X, Y, True, True),
    }
    print(f"{args.poses} poses, best of {args.repeat}")
    print(f"{'kernel':<18}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, call in cases.items():
        t_np = _time(lambda: call(kernels.NUMPY), args.repeat)
        t_nb = _time(lambda: call(kernels.NUMBA), args.repeat)
        print(f"{name:<18}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
