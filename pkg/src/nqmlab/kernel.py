"""Tangent kernels, their spectra and the learning-rate thresholds they imply."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .errors import AssumptionError, DegenerateKernelError, DimensionError, NumericError
from .models import (
    AnchoredModelState,
    Dataset,
    GeneralQuadraticModel,
    _as_inputs,
    gqm_gradient,
)

RANK_TOL = 1e-8


@dataclass(frozen=True)
class TangentKernelSnapshot:
    """Kernel matrix with its eigendecomposition, eigenvalues descending.

    Eigenvectors are the columns of ``eigenvectors``.
    """

    K: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    step: int = 0

    @classmethod
    def from_matrix(cls, K, step: int = 0) -> "TangentKernelSnapshot":
        K = np.asarray(K, dtype=np.float64)
        if K.ndim != 2 or K.shape[0] != K.shape[1]:
            raise DimensionError(f"kernel must be square, got {K.shape}")
        if not np.all(np.isfinite(K)):
            raise NumericError("kernel has non-finite entries")
        K = 0.5 * (K + K.T)
        evals, evecs = np.linalg.eigh(K)
        # stable sort keeps first occurrence first on exact ties
        order = np.argsort(-evals, kind="stable")
        return cls(K, evals[order], evecs[:, order], int(step))

    @property
    def n(self) -> int:
        return self.K.shape[0]

    @property
    def lambda_max(self) -> float:
        return float(self.eigenvalues[0])

    def numerical_rank(self, tol: float = RANK_TOL) -> int:
        lam = self.lambda_max
        if lam <= 0:
            return 0
        return int(np.sum(self.eigenvalues > tol * lam))

    def rayleigh(self, direction) -> float:
        p = np.asarray(direction, dtype=np.float64)
        nrm2 = p @ p
        if nrm2 == 0:
            raise ValueError("zero direction")
        return float(p @ self.K @ p / nrm2)


def _first_bad_row(J: np.ndarray) -> int:
    bad = np.flatnonzero(~np.all(np.isfinite(J), axis=1))
    return int(bad[0]) if bad.size else -1


def tangent_kernel(state, data, step: int = 0) -> TangentKernelSnapshot:
    """Gram matrix of per-example parameter gradients.

    Parameters
    ----------
    state : AnchoredModelState or GeneralQuadraticModel
    data : Dataset or array of inputs
        For a quadratic model each row is passed to ``phi`` and ``sigma``.
    step : int
        Stored on the snapshot for bookkeeping.

    Raises
    ------
    NumericError
        If any per-example gradient is non-finite; ``index`` names the row.
    """
    X = data.inputs if isinstance(data, Dataset) else data
    if isinstance(state, GeneralQuadraticModel):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        J = np.stack([gqm_gradient(state, x) for x in X])
        bad = _first_bad_row(J)
        if bad >= 0:
            raise NumericError(f"non-finite gradient for example {bad}", index=bad)
        with np.errstate(over="ignore", invalid="ignore"):
            K = J @ J.T
        return TangentKernelSnapshot.from_matrix(K, step)
    if X is not state.train_inputs:
        X = _as_inputs(X, state.d)
    K = _kernels.relu_gram(*state.kernel_args(X))
    if not np.all(np.isfinite(K)):
        J = _kernels.relu_jacobian(*state.kernel_args(X))
        bad = max(_first_bad_row(J), 0)
        raise NumericError(f"non-finite gradient for example {bad}", index=bad)
    return TangentKernelSnapshot.from_matrix(K, step)


@dataclass(frozen=True)
class RateThresholds:
    """``eta_critical = 2/lambda_max`` and ``eta_max_estimate = 4/lambda_max``.

    ``per_direction`` lists ``(lambda_i, 2/lambda_i, 4/lambda_i)`` for every
    eigenvalue above the numerical-rank cutoff.
    """

    eta_critical: float
    eta_max_estimate: float
    per_direction: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "eta_critical": self.eta_critical,
            "eta_max_estimate": self.eta_max_estimate,
            "per_direction": [
                {"eigenvalue": lam, "two_over": a, "four_over": b} for lam, a, b in self.per_direction
            ],
        }


def critical_lr(snapshot) -> RateThresholds:
    if not isinstance(snapshot, TangentKernelSnapshot):
        snapshot = TangentKernelSnapshot.from_matrix(snapshot)
    lam = snapshot.lambda_max
    if not lam > 0:
        raise DegenerateKernelError("kernel has no positive eigenvalue")
    keep = snapshot.eigenvalues[snapshot.eigenvalues > 1e-10 * lam]
    per = [(float(e), 2.0 / float(e), 4.0 / float(e)) for e in keep]
    return RateThresholds(2.0 / lam, 4.0 / lam, per)


def _require_1d(data: Dataset) -> np.ndarray:
    if data.d != 1:
        raise AssumptionError(f"rank-2 structure needs 1-D inputs, got d={data.d}")
    x = data.inputs[:, 0]
    if not np.any(x != 0):
        raise AssumptionError("all inputs are zero")
    return x


def sign_masks(data: Dataset):
    """0/1 masks of the nonnegative and negative inputs (``d = 1``)."""
    x = _require_1d(data)
    plus = (x >= 0).astype(np.float64)
    return plus, 1.0 - plus


def rank2_eigenstructure(data: Dataset):
    """Sign-masked inputs ``(p1, p2)``, unnormalized.

    For one-dimensional inputs these are eigenvectors of the tangent kernel of
    every ReLU family at every parameter value, and they span its range.
    """
    x = _require_1d(data)
    plus, minus = sign_masks(data)
    return x * plus, x * minus


def kernel_scale_bounds(data: Dataset):
    """High-probability band ``(lower, upper)`` for the initial top eigenvalue.

    One example: ``[|x|^2/(2d), 3|x|^2/(2d)]``. Several 1-D examples: ``[M/2, 3M/2]``
    where ``M`` is the larger of the two sign-restricted sums of ``x_i^2``.
    """
    if data.n == 1:
        x = data.inputs[0]
        s = float(x @ x) / data.d
        return 0.5 * s, 1.5 * s
    if data.d != 1:
        raise DimensionError("kernel scale band for several examples needs d = 1")
    x = data.inputs[:, 0]
    sq_plus = float(np.sum(x[x >= 0] ** 2))
    sq_minus = float(np.sum(x[x <= 0] ** 2))
    M = max(sq_plus, sq_minus)
    return 0.5 * M, 1.5 * M


def export_eigenvalues_csv(snapshots: Sequence[TangentKernelSnapshot], path, k: int = 2) -> Path:
    """One row per snapshot: ``step,lambda1,...,lambdak`` (blank past the kernel size)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step"] + [f"lambda{i + 1}" for i in range(k)])
        for snap in snapshots:
            vals = [repr(float(e)) for e in snap.eigenvalues[:k]]
            w.writerow([snap.step] + vals + [""] * (k - len(vals)))
    return path
