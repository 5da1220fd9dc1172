from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import RELU_FAMILIES, fd_gradient, perturbed_state
from nqmlab.dynamics import gd_step
from nqmlab.errors import AssumptionError, DegenerateKernelError, DimensionError, NumericError
from nqmlab.experiments import gen_gaussian_1d, gen_single_example
from nqmlab.kernel import (
    TangentKernelSnapshot,
    critical_lr,
    export_eigenvalues_csv,
    kernel_scale_bounds,
    rank2_eigenstructure,
    sign_masks,
    tangent_kernel,
)
from nqmlab.models import (
    AnchoredModelState,
    Dataset,
    Family,
    NetworkParams,
    build_random_gqm,
    model_jacobian,
    ntk_initialize,
    predict,
)


def _random_1d(rng, n):
    x = rng.standard_normal(n)
    return Dataset(x[:, None], rng.choice([-1.0, 1.0], n))


class TestSnapshot:
    def test_descending_and_eigenpairs(self, rng):
        A = rng.standard_normal((6, 6))
        snap = TangentKernelSnapshot.from_matrix(A @ A.T, step=3)
        assert snap.step == 3
        assert np.all(np.diff(snap.eigenvalues) <= 0)
        for i in range(6):
            vec = snap.eigenvectors[:, i]
            np.testing.assert_allclose(snap.K @ vec, snap.eigenvalues[i] * vec, atol=1e-10 * snap.lambda_max)

    def test_non_square(self):
        with pytest.raises(DimensionError):
            TangentKernelSnapshot.from_matrix(np.ones((2, 3)))

    def test_non_finite(self):
        with pytest.raises(NumericError):
            TangentKernelSnapshot.from_matrix(np.array([[np.nan]]))

    def test_rank_and_rayleigh(self):
        snap = TangentKernelSnapshot.from_matrix(np.diag([3.0, 1e-12, 0.0]))
        assert snap.numerical_rank() == 1
        assert snap.rayleigh([2.0, 0.0, 0.0]) == pytest.approx(3.0)
        with pytest.raises(ValueError):
            snap.rayleigh(np.zeros(3))


class TestTangentKernel:
    def test_single_example_is_squared_gradient_norm(self, rng):
        X = rng.standard_normal((1, 3))
        state = perturbed_state(Family.NETWORK, 7, 3, 0, X)
        J = model_jacobian(state, X)
        snap = tangent_kernel(state, X)
        assert snap.K.shape == (1, 1)
        assert snap.K[0, 0] == pytest.approx(J[0] @ J[0], rel=1e-12)

    @pytest.mark.parametrize("family", RELU_FAMILIES)
    def test_gram_of_jacobian(self, family, rng):
        X = rng.standard_normal((5, 3))
        state = perturbed_state(family, 9, 3, 1, X)
        J = model_jacobian(state, X)
        np.testing.assert_allclose(tangent_kernel(state, X).K, J @ J.T, rtol=1e-12, atol=1e-14)

    def test_matches_fd_gram(self, rng):
        X = rng.standard_normal((3, 2))
        state = perturbed_state(Family.NQM, 4, 2, 2, X)
        w = state.current.flat()
        rows = [fd_gradient(lambda wv, k=k: predict(state.with_current(NetworkParams.from_flat(wv, 4, 2)), X)[k], w)
                for k in range(3)]
        J = np.array(rows)
        np.testing.assert_allclose(tangent_kernel(state, X).K, J @ J.T, rtol=1e-6)

    def test_linearized_constant(self, rng):
        X = rng.standard_normal((4, 2))
        a = perturbed_state(Family.LINEARIZED, 8, 2, 0, X, scale=0.1)
        b = perturbed_state(Family.LINEARIZED, 8, 2, 0, X, scale=3.0)
        np.testing.assert_array_equal(tangent_kernel(a, X).K, tangent_kernel(b, X).K)

    @pytest.mark.parametrize("family", RELU_FAMILIES)
    def test_symmetric_psd(self, family, rng):
        X = rng.standard_normal((12, 3))
        snap = tangent_kernel(perturbed_state(family, 20, 3, 3, X), X)
        np.testing.assert_allclose(snap.K, snap.K.T, atol=1e-10)
        assert snap.eigenvalues.min() >= -1e-8 * snap.lambda_max

    def test_gqm_kernel(self):
        model = build_random_gqm(30, seed=1)
        x = model.reference_input
        grad = model.features(x) + model.gamma * model.curvature(x) * model.w
        assert tangent_kernel(model, x[None, :]).K[0, 0] == pytest.approx(grad @ grad)

    def test_non_finite_gradient_names_example(self, rng):
        X = rng.standard_normal((3, 2))
        X[1, 0] = np.inf
        state = AnchoredModelState.create(Family.NETWORK, ntk_initialize(4, 2, 0))
        with pytest.raises(NumericError) as err:
            tangent_kernel(state, X)
        assert err.value.index == 1

    def test_linearized_kernel_step_invariant(self):
        data = gen_gaussian_1d(16, 0)
        state = AnchoredModelState.create(Family.LINEARIZED, ntk_initialize(200, 1, 0), data.inputs)
        K0 = tangent_kernel(state, data).K
        eta = 0.5 * critical_lr(K0).eta_critical
        for t in range(500):
            state = gd_step(state, data, eta, t)
        assert np.max(np.abs(tangent_kernel(state, data).K - K0)) < 1e-10


class TestCriticalLr:
    def test_identity(self):
        thr = critical_lr(np.eye(5))
        assert thr.eta_critical == pytest.approx(2.0)
        assert thr.eta_max_estimate == pytest.approx(4.0)
        assert len(thr.per_direction) == 5

    def test_rank_one(self):
        thr = critical_lr(np.diag([3.0, 0.0, 0.0]))
        assert thr.eta_critical == pytest.approx(2 / 3)
        assert len(thr.per_direction) == 1

    def test_zero_kernel(self):
        with pytest.raises(DegenerateKernelError):
            critical_lr(np.zeros((3, 3)))

    def test_to_dict(self):
        doc = critical_lr(np.diag([4.0, 1.0])).to_dict()
        assert doc["per_direction"][1] == {"eigenvalue": 1.0, "two_over": 2.0, "four_over": 4.0}

    def test_gaussian_1d_ordering(self):
        data = gen_gaussian_1d(128, 0)
        state = AnchoredModelState.create(Family.NQM, ntk_initialize(5000, 1, 0), data.inputs)
        thr = critical_lr(tangent_kernel(state, data))
        two1, two2 = thr.per_direction[0][1], thr.per_direction[1][1]
        assert two1 < two2 < thr.eta_max_estimate

    def test_matches_linearized_loss_hessian(self, rng):
        for seed in range(5):
            X = rng.standard_normal((6, 2))
            state = perturbed_state(Family.LINEARIZED, 12, 2, seed, X)
            J = model_jacobian(state, X)
            hess_top = np.linalg.eigvalsh(J.T @ J).max()
            assert critical_lr(tangent_kernel(state, X)).eta_critical == pytest.approx(2 / hess_top, rel=1e-10)


class TestRank2:
    def test_construction(self):
        p1, p2 = rank2_eigenstructure(Dataset(np.array([[1.0], [-1.0]]), [1.0, -1.0]))
        np.testing.assert_array_equal(p1, [1.0, 0.0])
        np.testing.assert_array_equal(p2, [0.0, -1.0])

    def test_all_positive_rank_one(self, rng):
        data = Dataset(np.abs(rng.standard_normal((6, 1))) + 0.1, np.ones(6))
        p1, p2 = rank2_eigenstructure(data)
        assert not np.any(p2)
        snap = tangent_kernel(perturbed_state(Family.NQM, 30, 1, 0, data.inputs), data)
        assert snap.numerical_rank() == 1

    def test_assumptions(self):
        with pytest.raises(AssumptionError):
            rank2_eigenstructure(Dataset(np.zeros((3, 1)), np.ones(3)))
        with pytest.raises(AssumptionError):
            rank2_eigenstructure(Dataset(np.ones((3, 2)), np.ones(3)))

    def test_masks_partition(self, rng):
        data = _random_1d(rng, 9)
        plus, minus = sign_masks(data)
        np.testing.assert_array_equal(plus + minus, np.ones(9))

    @given(seed=st.integers(0, 2**31 - 1), n=st.integers(2, 32), fam=st.sampled_from(RELU_FAMILIES))
    def test_eigenvectors_any_parameters(self, seed, n, fam):
        rng = np.random.default_rng(seed)
        data = _random_1d(rng, n)
        state = perturbed_state(fam, int(rng.integers(5, 60)), 1, seed % 1000, data.inputs, scale=0.5)
        snap = tangent_kernel(state, data)
        for p in rank2_eigenstructure(data):
            if np.any(p):
                Kp = snap.K @ p
                lam = snap.rayleigh(p)
                assert np.linalg.norm(Kp - lam * p) <= 1e-8 * np.linalg.norm(Kp) + 1e-300
        if n > 2:
            assert snap.eigenvalues[2] < 1e-8 * snap.lambda_max

    def test_rank2_identity_along_training(self):
        data = gen_gaussian_1d(16, 3)
        state = AnchoredModelState.create(Family.NQM, ntk_initialize(300, 1, 3), data.inputs)
        p1, p2 = (p / np.linalg.norm(p) for p in rank2_eigenstructure(data))
        eta = 2.5 / tangent_kernel(state, data).lambda_max
        for t in range(60):
            K = tangent_kernel(state, data).K
            recon = (p1 @ K @ p1) * np.outer(p1, p1) + (p2 @ K @ p2) * np.outer(p2, p2)
            assert np.max(np.abs(K - recon)) <= 1e-8 * np.max(np.abs(K))
            state = gd_step(state, data, eta, t)


class TestScaleBounds:
    def test_single_example_band(self):
        data = gen_single_example(7, 0)
        lo, hi = kernel_scale_bounds(data)
        assert (lo, hi) == pytest.approx((0.5, 1.5))

    def test_monte_carlo_coverage(self):
        data = gen_single_example(5, 0)
        lo, hi = kernel_scale_bounds(data)
        inside = 0
        for seed in range(200):
            state = AnchoredModelState.create(Family.NQM, ntk_initialize(5000, 5, seed), data.inputs)
            lam = tangent_kernel(state, data).lambda_max
            inside += lo <= lam <= hi
        assert inside >= 190

    def test_constant_inputs(self):
        c, n = 1.7, 5
        data = Dataset(np.full((n, 1), c), np.ones(n))
        lo, hi = kernel_scale_bounds(data)
        M = n * c * c
        assert (lo, hi) == pytest.approx((M / 2, 3 * M / 2))
        lam = tangent_kernel(AnchoredModelState.create(Family.NQM, ntk_initialize(5000, 1, 0), data.inputs), data).lambda_max
        assert lo <= lam <= hi

    def test_needs_1d(self, rng):
        with pytest.raises(DimensionError):
            kernel_scale_bounds(Dataset(rng.standard_normal((3, 2)), np.ones(3)))


class TestExport:
    def test_csv(self, tmp_path):
        snaps = [TangentKernelSnapshot.from_matrix(np.diag([2.0, 1.0, 0.5]), step=0),
                 TangentKernelSnapshot.from_matrix(np.diag([1.0]), step=4)]
        path = export_eigenvalues_csv(snaps, tmp_path / "eig.csv", k=2)
        lines = path.read_text().splitlines()
        assert lines[0] == "step,lambda1,lambda2"
        assert lines[1] == "0,2.0,1.0"
        assert lines[2] == "4,1.0,"
