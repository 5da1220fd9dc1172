"""Fast self-checks behind ``nqmlab verify``.

Each check builds a small instance, compares two independent computations and
returns ``(name, passed, detail)``. Everything here runs in a few seconds.
"""

from __future__ import annotations

import numpy as np

from . import _accel, _kernels
from .dynamics import RecorderOptions, classify_regime, simulate
from .experiments import ExperimentConfig, gen_gaussian_1d, gen_single_example
from .kernel import rank2_eigenstructure, tangent_kernel
from .models import (
    AnchoredModelState,
    Family,
    NetworkParams,
    make_rng,
    model_gradient,
    ntk_initialize,
    predict,
)

RELU_FAMILIES = (Family.NETWORK, Family.LINEARIZED, Family.NQM)


def _perturbed_state(family, m, d, seed, X, scale=0.3):
    anchor = ntk_initialize(m, d, seed)
    rng = make_rng(seed, 99)
    cur = NetworkParams(anchor.first_layer + scale * rng.standard_normal(anchor.first_layer.shape),
                        anchor.second_layer + scale * rng.standard_normal(anchor.second_layer.shape))
    return AnchoredModelState.create(family, anchor, X, cur)


def _fd_gradient(state, x, h=1e-6):
    w = state.current.flat()
    m, d = state.m, state.d
    out = np.empty_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = h
        fp = predict(state.with_current(NetworkParams.from_flat(w + e, m, d)), x[None, :])[0]
        fm = predict(state.with_current(NetworkParams.from_flat(w - e, m, d)), x[None, :])[0]
        out[i] = (fp - fm) / (2 * h)
    return out


def check_gradients(instances: int = 12, seed: int = 0):
    worst = 0.0
    rng = make_rng(seed, 1)
    for k in range(instances):
        fam = RELU_FAMILIES[k % 3]
        m, d = int(rng.integers(2, 6)), int(rng.integers(1, 4))
        X = rng.standard_normal((2, d))
        state = _perturbed_state(fam, m, d, seed + k, X)
        x = X[0]
        g = model_gradient(state, x)
        fd = _fd_gradient(state, x)
        worst = max(worst, float(np.linalg.norm(g - fd) / max(np.linalg.norm(g), 1e-12)))
    return "gradient_vs_finite_differences", worst < 1e-6, f"max rel err {worst:.2e}"


def check_nqm_second_difference(seed: int = 0):
    d, m = 3, 4
    rng = make_rng(seed, 2)
    X = rng.standard_normal((1, d))
    state = _perturbed_state(Family.NQM, m, d, seed, X)
    w0 = state.current.flat()
    z = rng.standard_normal(w0.size)
    h = 0.5

    def second_diff(w):
        f = [predict(state.with_current(NetworkParams.from_flat(w + s * h * z, m, d)), X)[0] for s in (-1, 0, 1)]
        return (f[0] - 2 * f[1] + f[2]) / h**2

    ref = second_diff(w0)
    spread = max(abs(second_diff(w0 + rng.standard_normal(w0.size)) - ref) for _ in range(5))
    return "nqm_second_difference_constant", spread < 1e-8, f"spread {spread:.2e}"


def check_scalar_engine(seed: int = 0):
    data = gen_single_example(5, seed)
    state = AnchoredModelState.create(Family.NQM, ntk_initialize(500, 5, seed), data.inputs)
    lam0 = tangent_kernel(state, data).lambda_max
    opt = RecorderOptions(kernel_every=0, stop_at_floor=False)
    a = simulate(state, data, 3.0 / lam0, 100, opt, "gd")
    b = simulate(state, data, 3.0 / lam0, 100, opt, "scalar")
    n = min(len(a), len(b))
    err = float(np.max(np.abs(a.lambda1[:n] - b.lambda1[:n]) / np.abs(b.lambda1[:n])))
    return "scalar_recursion_matches_gd", err < 1e-8 and len(a) == len(b), f"max rel lambda err {err:.2e}"


def check_multi_engine(seed: int = 0):
    data = gen_gaussian_1d(8, seed)
    state = AnchoredModelState.create(Family.NQM, ntk_initialize(300, 1, seed), data.inputs)
    lam0 = tangent_kernel(state, data).lambda_max
    opt = RecorderOptions(kernel_every=0, stop_at_floor=False)
    a = simulate(state, data, 2.5 / lam0, 100, opt, "gd")
    b = simulate(state, data, 2.5 / lam0, 100, opt, "multi")
    n = min(len(a), len(b))
    err = float(np.max(np.abs(a.lambda1[:n] - b.lambda1[:n]) / np.abs(b.lambda1[:n])))
    return "multi_recursion_matches_gd", err < 1e-8 and len(a) == len(b), f"max rel lambda err {err:.2e}"


def check_rank2(seed: int = 0):
    data = gen_gaussian_1d(16, seed)
    worst = 0.0
    for fam in RELU_FAMILIES:
        state = _perturbed_state(fam, 50, 1, seed, data.inputs, scale=0.5)
        snap = tangent_kernel(state, data)
        for p in rank2_eigenstructure(data):
            if not np.any(p):
                continue
            Kp = snap.K @ p
            lam = snap.rayleigh(p)
            worst = max(worst, float(np.linalg.norm(Kp - lam * p) / np.linalg.norm(Kp)))
        worst = max(worst, float(snap.eigenvalues[2] / snap.lambda_max))
    return "rank2_eigenstructure", worst < 1e-10, f"max residual {worst:.2e}"


def check_linearized_kernel_constant(seed: int = 0):
    data = gen_gaussian_1d(6, seed)
    anchor = ntk_initialize(40, 1, seed)
    a = tangent_kernel(AnchoredModelState.create(Family.LINEARIZED, anchor, data.inputs), data).K
    b = tangent_kernel(_perturbed_state(Family.LINEARIZED, 40, 1, seed, data.inputs, scale=1.0), data).K
    err = float(np.max(np.abs(a - b)) / np.max(np.abs(a)))
    return "linearized_kernel_constant", err < 1e-12, f"rel change {err:.2e}"


def check_regime_bands(seed: int = 0):
    data = gen_single_example(5, seed)
    state = AnchoredModelState.create(Family.NQM, ntk_initialize(2000, 5, seed), data.inputs)
    lam0 = tangent_kernel(state, data).lambda_max
    got = []
    for factor in (1.0, 3.0, 4.5):
        traj = simulate(state, data, factor / lam0, 500, RecorderOptions(kernel_every=0), "scalar")
        got.append(classify_regime(traj).regime)
    ok = got == ["Monotonic", "Catapult", "Divergent"]
    return "regime_bands_single_example", ok, "/".join(got)


def check_backend_parity(seed: int = 0):
    if not _accel.NUMBA_AVAILABLE:
        return "numba_numpy_parity", True, "numba unavailable, numpy only"
    rng = make_rng(seed, 3)
    X = rng.standard_normal((7, 3))
    worst = 0.0
    for fam in RELU_FAMILIES:
        state = _perturbed_state(fam, 9, 3, seed, X)
        args = state.kernel_args(X)
        r = rng.standard_normal(7)
        for np_fn, nb_fn, extra in (
            (_kernels.relu_outputs_np, _kernels.relu_outputs_nb, ()),
            (_kernels.relu_gram_np, _kernels.relu_gram_nb, ()),
        ):
            a, b = np_fn(*args), nb_fn(*args)
            worst = max(worst, float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), 1e-300)))
        a = _kernels.relu_vjp_np(args[0], r, *args[1:])
        b = _kernels.relu_vjp_nb(args[0], r, *args[1:])
        for x, y in zip(a, b):
            worst = max(worst, float(np.max(np.abs(x - y)) / max(np.max(np.abs(x)), 1e-300)))
    return "numba_numpy_parity", worst < 1e-12, f"max rel diff {worst:.2e}"


CHECKS = (
    check_gradients,
    check_nqm_second_difference,
    check_scalar_engine,
    check_multi_engine,
    check_rank2,
    check_linearized_kernel_constant,
    check_regime_bands,
    check_backend_parity,
)


def run_checks(config: ExperimentConfig | None = None):
    """Run every check with the first configured seed; returns a list of triples."""
    seed = int(config.seeds[0]) if config is not None else 0
    return [chk(seed) for chk in CHECKS]
