"""Time the numba kernels against their pure-numpy fallbacks.

Usage::

    python3 benchmarks/bench_kernels.py --width 5000 --n 128 --repeat 5

Each row reports the best-of-``repeat`` wall time of one call (after a warm-up
call that also triggers JIT compilation) and the max relative difference
between the two outputs.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from nqmlab import _kernels
from nqmlab.experiments import gen_gaussian_1d
from nqmlab.kernel import rank2_eigenstructure, tangent_kernel
from nqmlab.models import AnchoredModelState, Dataset, Family, NetworkParams, make_rng, ntk_initialize, predict


def best_time(fn, args, repeat):
    fn(*args)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, out


def max_rel(a, b):
    if isinstance(a, tuple):
        return max(max_rel(x, y) for x, y in zip(a, b))
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), 1e-300))


def cases(width, n, d, steps):
    rng = make_rng(0)
    X = rng.standard_normal((n, d))
    anchor = ntk_initialize(width, d, 0)
    cur = NetworkParams(anchor.first_layer + 0.1 * rng.standard_normal(anchor.first_layer.shape),
                        anchor.second_layer + 0.1 * rng.standard_normal(width))
    state = AnchoredModelState.create(Family.NQM, anchor, X, cur)
    args = state.kernel_args(X)
    r = rng.standard_normal(n)
    yield "preact", _kernels.preact_np, _kernels._preact_nb, (X, cur.first_layer)
    yield "relu_outputs", _kernels.relu_outputs_np, _kernels.relu_outputs_nb, args
    yield "relu_vjp", _kernels.relu_vjp_np, _kernels.relu_vjp_nb, (args[0], r, *args[1:])
    yield "relu_gram", _kernels.relu_gram_np, _kernels.relu_gram_nb, args
    yield "scalar_recursion", _kernels.scalar_recursion_np, _kernels.scalar_recursion_nb, (
        0.3, 1.0, 0.0, 3.0, 1e-4, steps)

    data = gen_gaussian_1d(n if n % 2 == 0 else n + 1, 0)
    st1 = AnchoredModelState.create(Family.NQM, ntk_initialize(width, 1, 0), data.inputs)
    K = tangent_kernel(st1, data).K
    p1, p2 = rank2_eigenstructure(data)
    x = data.inputs[:, 0]
    mplus, mminus = (x >= 0).astype(float), (x < 0).astype(float)
    dirs = np.vstack([p / np.linalg.norm(p) for p in (p1, p2) if np.any(p)])
    eta = 2.5 / np.linalg.eigvalsh(K).max()
    yield "multi_recursion", _kernels.multi_recursion_np, _kernels.multi_recursion_nb, (
        predict(st1, data), K, data.labels, p1, p2, mplus, mminus, eta, width, dirs, steps)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--width", type=int, default=5000)
    parser.add_argument("--n", type=int, default=128)
    parser.add_argument("--d", type=int, default=8)
    parser.add_argument("--steps", type=int, default=1000, help="steps for the recursion kernels")
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)

    print(f"width={args.width} n={args.n} d={args.d} steps={args.steps}")
    print(f"{'kernel':<18}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}{'max rel diff':>15}")
    for name, np_fn, nb_fn, fargs in cases(args.width, args.n, args.d, args.steps):
        t_np, out_np = best_time(np_fn, fargs, args.repeat)
        t_nb, out_nb = best_time(nb_fn, fargs, args.repeat)
        print(f"{name:<18}{1e3 * t_np:>12.3f}{1e3 * t_nb:>12.3f}{t_np / t_nb:>10.2f}{max_rel(out_np, out_nb):>15.2e}")


if __name__ == "__main__":
    main()
