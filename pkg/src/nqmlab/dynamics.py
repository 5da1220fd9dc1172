"""Gradient descent in parameter space, closed-form dynamics recursions and
regime classification.

Three simulation engines share one recorder:

``gd``
    parameter-space (S)GD on any family, including quadratic models;
``scalar``
    the closed-form ``(g, lambda)`` recursion for an NQM on one example;
``multi``
    the closed-form ``(g, K)`` recursion for an NQM on 1-D data.

For a quadratic model the closed forms are exact algebra, so the engines agree
to round-off.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .errors import AssumptionError, DivergenceSignal, NumericError
from .kernel import RateThresholds, rank2_eigenstructure, sign_masks, tangent_kernel
from .models import (
    AnchoredModelState,
    Dataset,
    Family,
    GeneralQuadraticModel,
    NetworkParams,
    gqm_forward,
    gqm_gradient,
    hessian_vector_products,
    make_rng,
    model_jacobian,
    predict,
)

DIVERGENCE_THRESHOLD = 1e12
CSV_COLUMNS = ("step", "loss", "lambda1", "lambda2", "pi1_loss", "pi2_loss", "param_disp", "rf_norm", "rk_norm")


# --------------------------------------------------------------------------
# parameter-space steps
# --------------------------------------------------------------------------


def _relu_outputs_and_grad(state: AnchoredModelState, X, y):
    args = state.kernel_args(X)
    return _kernels.relu_loss_grad(args[0], y, *args[1:])


def _gqm_outputs_and_grad(model: GeneralQuadraticModel, X, y):
    out = np.array([gqm_forward(model, x) for x in X])
    r = out - y
    grad = np.zeros(model.p)
    for rk, x in zip(r, X):
        if rk != 0.0:
            grad += rk * gqm_gradient(model, x)
    return out, grad


def _apply_update(state, grads, eta, step):
    if isinstance(state, GeneralQuadraticModel):
        w = state.w - eta * grads
        if not np.all(np.isfinite(w)):
            raise DivergenceSignal(step)
        return state.with_weights(w)
    gU, gv = grads
    U = state.current.first_layer - eta * gU
    v = state.current.second_layer - eta * gv
    if not (np.all(np.isfinite(U)) and np.all(np.isfinite(v))):
        raise DivergenceSignal(step)
    return state.with_current(NetworkParams(U, v))


def _grads(state, X, y):
    if isinstance(state, GeneralQuadraticModel):
        out, g = _gqm_outputs_and_grad(state, X, y)
        return out, g
    out, gU, gv = _relu_outputs_and_grad(state, X, y)
    return out, (gU, gv)


def gd_step(state, data: Dataset, eta: float, step: int = 0):
    """One full-batch step on ``L = 1/2 sum (f(x_i) - y_i)^2``.

    Raises
    ------
    DivergenceSignal
        If the update is non-finite. ``step`` is carried on the signal.
    """
    if not eta > 0:
        raise ValueError("eta must be positive")
    X = data.inputs
    with np.errstate(over="ignore", invalid="ignore"):
        _, grads = _grads(state, X, data.labels)
        return _apply_update(state, grads, eta, step)


def sgd_step(state, data: Dataset, eta: float, batch_indices, step: int = 0):
    """Gradient step on the loss restricted to ``batch_indices``."""
    idx = np.asarray(batch_indices)
    if idx.size == 0:
        raise ValueError("batch must be nonempty")
    if idx.size == data.n and np.array_equal(np.sort(idx), np.arange(data.n)):
        return gd_step(state, data, eta, step)
    return gd_step(state, data.subset(idx), eta, step)


# --------------------------------------------------------------------------
# single-example closed form
# --------------------------------------------------------------------------


def scalar_dynamics_step(g: float, lam: float, y: float, eta: float, xnorm2_over_md: float):
    """One step of the exact ``(g, lambda)`` recursion for an NQM on one example.

    ``g' - y = (1 - eta lam + c eta^2 (g - y) g)(g - y)`` and
    ``lam' = lam - eta c (4 (g - y) g - eta lam (g - y)^2)`` with
    ``c = |x|^2 / (m d)``. The kernel update is written as a product so that
    ``g = y`` is a regular fixed point.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    r = g - y
    c = xnorm2_over_md
    g_new = y + (1.0 - eta * lam + c * eta * eta * r * g) * r
    lam_new = lam - eta * c * (4.0 * r * g - eta * lam * r * r)
    return g_new, lam_new


@dataclass(frozen=True)
class ScalarDynamicsState:
    """Dimensionless variables of the single-example recursion.

    ``u = c eta^2 (g-y)^2``, ``v = eta lam``, ``w = c eta^2 (g-y) y`` with
    ``c = |x|^2/(md)``. ``kappa`` is the growth factor of the step that produced
    this state (NaN for the initial state).
    """

    u: float
    v: float
    w: float
    step: int = 0
    kappa: float = float("nan")

    @classmethod
    def from_scalar(cls, g, lam, y, eta, xnorm2_over_md, step: int = 0):
        c = xnorm2_over_md
        r = g - y
        return cls(c * eta * eta * r * r, eta * lam, c * eta * eta * r * y, step)


def uvw_step(state: ScalarDynamicsState) -> ScalarDynamicsState:
    u, v, w = state.u, state.v, state.w
    mu = 1.0 - v + u + w
    kappa = mu * mu
    # w' = mu w follows from (g'-y) = mu (g-y); it closes the system
    return ScalarDynamicsState(kappa * u, v - u * (4.0 - v) - 4.0 * w, mu * w, state.step + 1, kappa)


# --------------------------------------------------------------------------
# multi-example closed form (1-D inputs)
# --------------------------------------------------------------------------


def multi_dynamics_step(g, K, data: Dataset, eta: float, m: int):
    """One step of the exact ``(g, K)`` recursion for an NQM on 1-D inputs.

    Parameters
    ----------
    g : array (n,)
        Current outputs.
    K : array (n, n)
        Current tangent kernel.
    data : Dataset
        Must have ``d = 1``.
    eta : float
    m : int
        Network width; the quadratic corrections scale as ``1/m``.
    """
    p1, p2 = rank2_eigenstructure(data)
    mplus, mminus = sign_masks(data)
    g = np.asarray(g, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    if g.shape != (data.n,) or K.shape != (data.n, data.n):
        raise ValueError("g and K must match the dataset size")
    return _kernels.multi_step_np(g, K, data.labels, p1, p2, mplus, mminus, eta, m)


# --------------------------------------------------------------------------
# general corrections
# --------------------------------------------------------------------------


def general_residual_corrections(state: AnchoredModelState, data: Dataset, eta: float):
    """Quadratic corrections ``(R_f, R_K)`` to the linear output/kernel dynamics.

    With ``J`` the per-example Jacobian, ``r`` the residual, ``s = J' r`` and
    ``G[i] = H(x_i) s``:

    * ``f(t+1) - y = (I - eta K + R_f) r`` with ``R_f = eta^2/2 G J'``;
    * ``K(t+1) = K - R_K`` with ``R_K = eta (G J' + J G') - eta^2 G G'``.

    Both identities are exact for the NQM. Hessian products use the mixed
    block only and cost ``O(m d)`` per example.
    """
    if state.family is not Family.NQM:
        raise ValueError("exact corrections are defined for the nqm family")
    X = data.inputs
    J = model_jacobian(state, X)
    r = predict(state, X) - data.labels
    G = hessian_vector_products(state, X, J.T @ r)
    GJ = G @ J.T
    R_f = 0.5 * eta * eta * GJ
    R_K = eta * (GJ + GJ.T) - eta * eta * (G @ G.T)
    return R_f, R_K


def gqm_dynamics_step(g, lam, eta, gamma, xnorm2, y: float = 0.0, model=None, atol: float = 1e-10):
    """Displayed recursion for a pure quadratic model (``phi = 0``) on one example.

    ``g' = (1 - eta lam + gamma eta^2 |x|^2 g^2) g`` and
    ``lam' = lam - gamma |x|^2 g^2 (4 - eta lam)``.

    Here ``gamma`` plays the part of ``1/m``. Exact gradient descent on
    ``g = gamma/2 w' Sigma w`` follows :func:`gqm_exact_step` instead, which
    differs by ``gamma -> gamma^2`` and an ``eta`` in the kernel update.

    Raises
    ------
    AssumptionError
        If ``y != 0`` or, when ``model`` is given, ``phi`` is nonzero or
        ``Sigma^2 != |x|^2 I`` at the model's reference input.
    """
    _check_phi0(y, model, xnorm2, atol)
    g_new = (1.0 - eta * lam + gamma * eta * eta * xnorm2 * g * g) * g
    lam_new = lam - gamma * xnorm2 * g * g * (4.0 - eta * lam)
    return g_new, lam_new


def gqm_exact_step(g, lam, eta, gamma, xnorm2, y: float = 0.0, model=None, atol: float = 1e-10):
    """Exact GD recursion for ``g = gamma/2 w' Sigma w`` with ``Sigma^2 = |x|^2 I``."""
    _check_phi0(y, model, xnorm2, atol)
    return scalar_dynamics_step(g, lam, 0.0, eta, gamma * gamma * xnorm2)


def _check_phi0(y, model, xnorm2, atol):
    if y != 0:
        raise AssumptionError("the pure quadratic recursion assumes label 0")
    if model is None:
        return
    x = model.reference_input
    if x is None:
        raise AssumptionError("model has no reference input")
    if np.max(np.abs(model.features(x))) > atol:
        raise AssumptionError("features must vanish")
    S = model.curvature(x)
    S2 = S * S if S.ndim == 1 else S @ S
    target = xnorm2 * (np.ones(model.p) if S.ndim == 1 else np.eye(model.p))
    if np.max(np.abs(S2 - target)) > atol * max(1.0, xnorm2):
        raise AssumptionError("curvature does not square to |x|^2 I")


# --------------------------------------------------------------------------
# trajectories
# --------------------------------------------------------------------------


def projected_loss(g, y, direction) -> float:
    """``1/2 <g - y, p>^2`` for a unit direction ``p`` (normalized here if needed)."""
    p = np.asarray(direction, dtype=np.float64)
    nrm = np.linalg.norm(p)
    if nrm == 0:
        raise ValueError("zero direction")
    a = (np.asarray(g, dtype=np.float64) - np.asarray(y, dtype=np.float64)) @ (p / nrm)
    return 0.5 * float(a * a)


@dataclass
class RecorderOptions:
    """What :func:`simulate` records and when it stops.

    Attributes
    ----------
    kernel_every : int or None
        Full kernel eigendecomposition cadence. ``None`` picks 1 for
        ``n <= 256`` when no exact eigendirections are tracked and 0 otherwise.
        0 means only the first and last step. For 1-D data and single examples
        the top eigenvalues are read exactly from the tracked directions every
        step, and the full decomposition only feeds the ``lambda3`` watchdog.
    directions : array (k, n) or None
        Directions for projected losses. Defaults to the sign-masked inputs
        for 1-D data (ordered by initial eigenvalue), else the top two initial
        eigenvectors.
    track_corrections : bool
        Record ``|R_f|_F`` and ``|R_K|_F`` (NQM, gd engine; costly).
    stop_at_floor : bool
        Stop once the loss reaches ``max(floor_rel * L0, floor_abs)``.
    eval_data : Dataset or None
        Held-out data evaluated every ``eval_every`` steps.
    batch_size : int or None
        Minibatch size for SGD; ``None`` means full-batch GD.
    seed : int
        Seed for the minibatch schedule.
    """

    kernel_every: Optional[int] = None
    directions: Optional[np.ndarray] = None
    track_corrections: bool = False
    stop_at_floor: bool = True
    floor_rel: float = 1e-10
    floor_abs: float = 1e-14
    divergence_threshold: float = DIVERGENCE_THRESHOLD
    eval_data: Optional[Dataset] = None
    eval_every: int = 5
    batch_size: Optional[int] = None
    seed: int = 0


@dataclass
class TrajectoryRecord:
    """Per-step time series of one run; every array has one entry per recorded step."""

    step: np.ndarray
    loss: np.ndarray
    lambda1: np.ndarray
    lambda2: np.ndarray
    lambda3: np.ndarray
    pi1_loss: np.ndarray
    pi2_loss: np.ndarray
    param_disp: np.ndarray
    rf_norm: np.ndarray
    rk_norm: np.ndarray
    residual_norm: np.ndarray
    eta: float
    engine: str
    stop_reason: str
    eval_step: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    test_loss: np.ndarray = field(default_factory=lambda: np.zeros(0))
    test_accuracy: np.ndarray = field(default_factory=lambda: np.zeros(0))
    directions: Optional[np.ndarray] = field(default=None, repr=False)
    final_outputs: Optional[np.ndarray] = field(default=None, repr=False)
    final_state: object = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.step)

    @property
    def initial_loss(self) -> float:
        return float(self.loss[0])

    @property
    def final_loss(self) -> float:
        return float(self.loss[-1])

    def rows(self):
        for k in range(len(self)):
            yield [int(self.step[k])] + [float(getattr(self, c)[k]) for c in CSV_COLUMNS[1:]]

    def to_csv(self, path) -> Path:
        """Write the per-step columns; floats use ``repr`` so values round-trip."""
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for row in self.rows():
                w.writerow([row[0]] + [repr(x) for x in row[1:]])
        return path

    @staticmethod
    def read_csv(path) -> dict:
        """Column name -> array, as written by :meth:`to_csv`."""
        with Path(path).open(newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or tuple(rows[0]) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected header")
        body = np.array([[float(x) for x in r] for r in rows[1:]]).reshape(-1, len(CSV_COLUMNS))
        return {c: body[:, i] for i, c in enumerate(CSV_COLUMNS)}


class _Recorder:
    def __init__(self, capacity: int):
        self.cols = {k: np.full(capacity, np.nan) for k in (
            "loss", "lambda1", "lambda2", "lambda3", "pi1_loss", "pi2_loss",
            "param_disp", "rf_norm", "rk_norm", "residual_norm")}
        self.n = 0
        self.eval_step: list = []
        self.test_loss: list = []
        self.test_acc: list = []

    def put(self, **vals):
        for k, val in vals.items():
            self.cols[k][self.n] = val

    def advance(self):
        self.n += 1

    def finish(self, eta, engine, reason, directions, final_outputs, final_state):
        n = self.n
        c = {k: v[:n].copy() for k, v in self.cols.items()}
        return TrajectoryRecord(
            step=np.arange(n, dtype=np.int64),
            eta=float(eta),
            engine=engine,
            stop_reason=reason,
            eval_step=np.asarray(self.eval_step, dtype=np.int64),
            test_loss=np.asarray(self.test_loss, dtype=np.float64),
            test_accuracy=np.asarray(self.test_acc, dtype=np.float64),
            directions=directions,
            final_outputs=final_outputs,
            final_state=final_state,
            **c,
        )


def _unit(p):
    nrm = np.linalg.norm(p)
    return p / nrm if nrm > 0 else np.zeros_like(p)


def _vjp(state, X, r):
    """``J' r`` as a flat parameter vector."""
    if isinstance(state, GeneralQuadraticModel):
        out = np.zeros(state.p)
        for rk, x in zip(r, X):
            if rk != 0.0:
                out += rk * gqm_gradient(state, x)
        return out
    args = state.kernel_args(X)
    gU, gv = _kernels.relu_vjp(args[0], r, *args[1:])
    return np.concatenate([gU.reshape(-1), gv])


def _exact_directions(state, data: Dataset):
    """Unit directions that stay kernel eigenvectors for the whole run, or None."""
    if data.n == 1:
        return np.ones((1, 1))
    if isinstance(state, GeneralQuadraticModel) or data.d != 1:
        return None
    p1, p2 = rank2_eigenstructure(data)
    return np.stack([_unit(p1), _unit(p2)])


def _order_by_rayleigh(state, X, dirs):
    lam = np.array([_rayleigh(state, X, p) for p in dirs])
    order = np.argsort(-lam, kind="stable")
    return dirs[order]


def _rayleigh(state, X, p):
    if not np.any(p):
        return 0.0
    z = _vjp(state, X, p)
    return float(z @ z)


def _flat(state):
    if isinstance(state, GeneralQuadraticModel):
        return state.w
    return state.current.flat()


def _top_eigs(state, X, k=3):
    ev = tangent_kernel(state, X).eigenvalues
    out = np.full(k, np.nan)
    out[: min(k, ev.size)] = ev[:k]
    return out, ev


def _eval(state, data: Dataset):
    if isinstance(state, GeneralQuadraticModel):
        out = np.array([gqm_forward(state, x) for x in data.inputs])
    else:
        out = predict(state, data.inputs)
    r = out - data.labels
    return 0.5 * float(np.mean(r * r)), float(np.mean(np.sign(out) == np.sign(data.labels)))


def simulate(state, data: Dataset, eta: float, max_steps: int = 1000, options: RecorderOptions | None = None,
             engine: str = "gd") -> TrajectoryRecord:
    """Run one training trajectory and record it.

    Parameters
    ----------
    state : AnchoredModelState or GeneralQuadraticModel
    data : Dataset
    eta : float
        Learning rate.
    max_steps : int
        Step budget; at most ``max_steps + 1`` rows are recorded (step 0 is
        the initial state).
    options : RecorderOptions
    engine : {"gd", "scalar", "multi"}

    Returns
    -------
    TrajectoryRecord
        ``stop_reason`` is one of ``"diverged"``, ``"converged"`` or
        ``"max_steps"``.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be at least 1")
    if not eta > 0:
        raise ValueError("eta must be positive")
    opt = options or RecorderOptions()
    if engine == "gd":
        return _simulate_gd(state, data, eta, max_steps, opt)
    if engine == "scalar":
        return _simulate_scalar(state, data, eta, max_steps, opt)
    if engine == "multi":
        return _simulate_multi(state, data, eta, max_steps, opt)
    raise ValueError(f"unknown engine {engine!r}")


def _floor(L0, opt):
    return max(opt.floor_rel * L0, opt.floor_abs)


def _simulate_gd(state, data, eta, max_steps, opt):
    X, y = data.inputs, data.labels
    n = data.n
    exact = _exact_directions(state, data)
    if opt.directions is not None:
        dirs = np.atleast_2d(np.asarray(opt.directions, dtype=np.float64))
        dirs = np.stack([_unit(p) for p in dirs])
    elif exact is not None:
        dirs = _order_by_rayleigh(state, X, exact)
    else:
        dirs = None
    kernel_every = opt.kernel_every
    if kernel_every is None:
        kernel_every = 1 if (exact is None and n <= 256) else 0
    if dirs is None:
        snap = tangent_kernel(state, X)
        dirs = snap.eigenvectors[:, : min(2, n)].T.copy()
    track_lambda_by_dirs = exact is not None and opt.directions is None
    corrections = opt.track_corrections and isinstance(state, AnchoredModelState) and state.family is Family.NQM
    rng = make_rng(opt.seed, 7) if opt.batch_size else None
    perm, pos = None, 0
    w0 = _flat(state)

    rec = _Recorder(max_steps + 1)
    reason = "max_steps"
    out = None
    floor = None
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(max_steps + 1):
            out, grads, lams = _outputs_grads_rayleigh(state, X, y, dirs if track_lambda_by_dirs else None)
            r = out - y
            loss = 0.5 * float(r @ r)
            pis = [0.5 * float(r @ p) ** 2 for p in dirs]
            rec.put(
                loss=loss,
                residual_norm=float(np.linalg.norm(r)),
                pi1_loss=pis[0],
                pi2_loss=pis[1] if len(pis) > 1 else 0.0,
                param_disp=float(np.linalg.norm(_flat(state) - w0)),
            )
            last = t == max_steps
            finite = np.isfinite(loss)
            if finite and track_lambda_by_dirs:
                rec.put(lambda1=lams[0], lambda2=lams[1] if len(lams) > 1 else 0.0)
            if floor is None:
                floor = _floor(loss, opt)
            diverged = (not finite) or loss > opt.divergence_threshold
            done = diverged or last or (opt.stop_at_floor and loss <= floor)
            if finite and (t == 0 or done or (kernel_every and t % kernel_every == 0)):
                try:
                    e3, _ = _top_eigs(state, X)
                except NumericError:
                    e3 = np.full(3, np.nan)
                rec.put(lambda3=e3[2])
                if not track_lambda_by_dirs:
                    rec.put(lambda1=e3[0], lambda2=e3[1] if n > 1 else 0.0)
            if corrections and finite and not diverged:
                R_f, R_K = general_residual_corrections(state, data, eta)
                rec.put(rf_norm=float(np.linalg.norm(R_f)), rk_norm=float(np.linalg.norm(R_K)))
            if opt.eval_data is not None and finite and (t % opt.eval_every == 0 or done):
                tl, ta = _eval(state, opt.eval_data)
                rec.eval_step.append(t)
                rec.test_loss.append(tl)
                rec.test_acc.append(ta)
            rec.advance()
            if diverged:
                reason = "diverged"
                break
            if opt.stop_at_floor and loss <= floor:
                reason = "converged"
                break
            if last:
                break
            if rng is not None:
                if perm is None or pos + opt.batch_size > n:
                    perm, pos = rng.permutation(n), 0
                batch = perm[pos : pos + opt.batch_size]
                pos += opt.batch_size
                grads = _batch_grads(state, data, batch)
            try:
                state = _apply_update(state, grads, eta, t)
            except DivergenceSignal:
                rec.put(loss=np.inf, residual_norm=np.inf)
                rec.advance()
                reason = "diverged"
                break
    return rec.finish(eta, "gd", reason, dirs, out, state)


def _outputs_grads_rayleigh(state, X, y, dirs):
    """Outputs, loss gradient and ``|J' p|^2`` for each row of ``dirs`` in one pass."""
    if isinstance(state, GeneralQuadraticModel):
        out, grads = _grads(state, X, y)
        lams = [] if dirs is None else [_rayleigh(state, X, p) for p in dirs]
        return out, grads, lams
    args = state.kernel_args(X)
    out = _kernels.relu_outputs(*args)
    R = (out - y)[None, :]
    if dirs is not None:
        R = np.vstack([R, dirs])
    gU, gv = _kernels.relu_vjps(args[0], R, *args[1:])
    lams = [float(np.sum(gU[q] * gU[q]) + gv[q] @ gv[q]) for q in range(1, R.shape[0])]
    return out, (gU[0], gv[0]), lams


def _batch_grads(state, data, batch):
    if isinstance(state, GeneralQuadraticModel):
        return _grads(state, data.inputs[batch], data.labels[batch])[1]
    # reuse the cached anchor activations of the full training set
    v0, A0, Z0 = state.anchor_arrays(data.inputs)
    if A0.size:
        A0, Z0 = A0[batch], Z0[batch]
    cur = state.current
    _, gU, gv = _kernels.relu_loss_grad(data.inputs[batch], data.labels[batch], cur.first_layer,
                                        cur.second_layer, v0, A0, Z0, state.family.code)
    return gU, gv


def _truncate(loss, opt):
    """Index of the last row to keep and the stop reason."""
    L0 = loss[0]
    floor = _floor(L0, opt)
    bad = ~np.isfinite(loss) | (loss > opt.divergence_threshold)
    stop_div = int(np.argmax(bad)) if bad.any() else None
    stop_conv = None
    if opt.stop_at_floor:
        hit = loss <= floor
        stop_conv = int(np.argmax(hit)) if hit.any() else None
    cands = [(i, why) for i, why in ((stop_div, "diverged"), (stop_conv, "converged")) if i is not None]
    if not cands:
        return len(loss) - 1, "max_steps"
    return min(cands)


def _require_nqm(state):
    if not isinstance(state, AnchoredModelState) or state.family is not Family.NQM:
        raise ValueError("closed-form engines need an nqm state")


def _simulate_scalar(state, data, eta, max_steps, opt):
    _require_nqm(state)
    if data.n != 1:
        raise ValueError("the scalar engine handles a single example")
    x = data.inputs[0]
    y = float(data.labels[0])
    c = float(x @ x) / (state.m * state.d)
    g0 = float(predict(state, data.inputs)[0])
    lam0 = float(tangent_kernel(state, data).K[0, 0])
    with np.errstate(over="ignore", invalid="ignore"):
        g, lam = _kernels.scalar_recursion(g0, lam0, y, eta, c, max_steps)
        r = g - y
        loss = 0.5 * r * r
    k, reason = _truncate(loss, opt)
    rec = _Recorder(k + 1)
    sl = slice(0, k + 1)
    with np.errstate(over="ignore", invalid="ignore"):
        rec.cols["loss"][:] = loss[sl]
        rec.cols["pi1_loss"][:] = loss[sl]
        rec.cols["pi2_loss"][:] = 0.0
        rec.cols["residual_norm"][:] = np.abs(r[sl])
        rec.cols["lambda1"][:] = lam[sl]
        rec.cols["lambda2"][:] = 0.0
        rec.cols["rf_norm"][:] = np.abs(c * eta * eta * r[sl] * g[sl])
        rec.cols["rk_norm"][:] = np.abs(eta * c * (4.0 * r[sl] * g[sl] - eta * lam[sl] * r[sl] ** 2))
    rec.n = k + 1
    return rec.finish(eta, "scalar", reason, np.ones((1, 1)), g[sl][-1:].copy(), None)


def _simulate_multi(state, data, eta, max_steps, opt):
    _require_nqm(state)
    p1, p2 = rank2_eigenstructure(data)
    mplus, mminus = sign_masks(data)
    g0 = predict(state, data.inputs)
    K0 = tangent_kernel(state, data).K
    dirs = np.stack([_unit(p1), _unit(p2)])
    y = data.labels
    with np.errstate(over="ignore", invalid="ignore"):
        G, R, _ = _kernels.multi_recursion(g0, K0, y, p1, p2, mplus, mminus, float(eta), float(state.m), dirs, max_steps)
        Rres = G - y
        loss = 0.5 * np.sum(Rres * Rres, axis=1)
    k, reason = _truncate(loss, opt)
    sl = slice(0, k + 1)
    order = np.argsort(-R[0], kind="stable")
    with np.errstate(over="ignore", invalid="ignore"):
        proj = Rres[sl] @ dirs.T
        pis = 0.5 * proj * proj
        q1 = np.sum(Rres[sl] * G[sl] * mplus, axis=1)
        q2 = np.sum(Rres[sl] * G[sl] * mminus, axis=1)
        n1, n2 = p1 @ p1, p2 @ p2
        m = state.m
        rf = (eta * eta / m) * np.sqrt((q1 * n1) ** 2 + (q2 * n2) ** 2)
        k1 = R[sl, 0] * proj[:, 0] ** 2
        k2 = R[sl, 1] * proj[:, 1] ** 2
        c1 = (eta * eta / m) * k1 - (4.0 * eta / m) * q1
        c2 = (eta * eta / m) * k2 - (4.0 * eta / m) * q2
        rk = np.sqrt((c1 * n1) ** 2 + (c2 * n2) ** 2)
    rec = _Recorder(k + 1)
    rec.cols["loss"][:] = loss[sl]
    rec.cols["residual_norm"][:] = np.sqrt(2.0 * loss[sl])
    rec.cols["lambda1"][:] = R[sl, order[0]]
    rec.cols["lambda2"][:] = R[sl, order[1]]
    rec.cols["pi1_loss"][:] = pis[:, order[0]]
    rec.cols["pi2_loss"][:] = pis[:, order[1]]
    rec.cols["rf_norm"][:] = rf
    rec.cols["rk_norm"][:] = rk
    rec.n = k + 1
    return rec.finish(eta, "multi", reason, dirs[order], G[k].copy(), None)


# --------------------------------------------------------------------------
# classification
# --------------------------------------------------------------------------

MONOTONIC = "Monotonic"
CATAPULT = "Catapult"
DIVERGENT = "Divergent"
UNCLASSIFIED = "Unclassified"


@dataclass(frozen=True)
class RegimeTolerances:
    """Thresholds used by :func:`classify_regime`.

    A run counts as converged if its final loss is below ``conv_rel * L0``,
    or if the loss has stopped moving: over the last ``plateau_window`` steps
    it changed by at most ``plateau_rel * L0``. The plateau rule matters for
    data whose residual has components the dynamics never touch.
    """

    rise_factor: float = 2.0
    tol_rise: float = 1e-6
    divergence_threshold: float = DIVERGENCE_THRESHOLD
    conv_rel: float = 1e-3
    plateau_rel: float = 1e-8
    plateau_window: int = 20


@dataclass
class RegimeReport:
    regime: str
    peak_loss: float
    peak_step: int
    initial_loss: float
    final_loss: float
    kernel_drop: float
    per_direction_catapult: list
    per_direction_regime: list
    eta: float
    thresholds: Optional[dict] = None
    stop_reason: str = ""
    diagnostics: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json_line(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), sort_keys=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if np.isfinite(f) else repr(f)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_reports_jsonl(reports: Sequence[RegimeReport], path) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for rep in reports:
            fh.write(rep.to_json_line() + "\n")
    return path


def _label(series, tol: RegimeTolerances, diverged: bool):
    """Regime label for one loss-like series and a diagnostics string."""
    s = np.asarray(series, dtype=np.float64)
    if diverged or not np.all(np.isfinite(s)) or np.nanmax(s) > tol.divergence_threshold:
        return DIVERGENT, "loss crossed the divergence threshold"
    L0, final = s[0], s[-1]
    peak = float(np.max(s))
    if L0 == 0.0:
        return (MONOTONIC, "") if peak == 0.0 else (UNCLASSIFIED, "rose from zero")
    w = min(tol.plateau_window, len(s) - 1)
    plateau = w > 0 and abs(s[-1 - w] - final) <= tol.plateau_rel * L0
    converged = final < tol.conv_rel * L0 or plateau
    if peak > tol.rise_factor * L0 and final < L0:
        return CATAPULT, ""
    if peak <= L0 * (1.0 + tol.tol_rise) and converged:
        return MONOTONIC, ""
    return UNCLASSIFIED, f"peak/L0={peak / L0:.4g}, final/L0={final / L0:.4g}, plateau={plateau}"


def classify_regime(traj: TrajectoryRecord, thresholds: RateThresholds | None = None,
                    tolerances: RegimeTolerances | None = None) -> RegimeReport:
    """Label a run Monotonic, Catapult, Divergent or Unclassified.

    The same rules are applied to the total loss and to each tracked
    projected loss; ``per_direction_catapult[i]`` is true when direction
    ``i`` on its own went through a catapult.
    """
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    tol = tolerances or RegimeTolerances()
    diverged = traj.stop_reason == "diverged"
    regime, diag = _label(traj.loss, tol, diverged)
    finite = np.isfinite(traj.loss)
    peak_step = int(np.argmax(np.where(finite, traj.loss, -np.inf))) if finite.any() else 0
    if not finite.all():
        peak_step = int(np.argmin(finite))
        peak_loss = float("inf")
    else:
        peak_loss = float(traj.loss[peak_step])
    per_regime = []
    for series in (traj.pi1_loss, traj.pi2_loss):
        lab, _ = _label(series, tol, diverged and regime == DIVERGENT and not np.all(np.isfinite(series)))
        per_regime.append(lab)
    lam = traj.lambda1
    ok = np.flatnonzero(np.isfinite(lam))
    drop = float(lam[ok[0]] - lam[ok[-1]]) if ok.size else float("nan")
    return RegimeReport(
        regime=regime,
        peak_loss=peak_loss,
        peak_step=peak_step,
        initial_loss=float(traj.loss[0]),
        final_loss=float(traj.loss[-1]),
        kernel_drop=drop,
        per_direction_catapult=[lab == CATAPULT for lab in per_regime],
        per_direction_regime=per_regime,
        eta=traj.eta,
        thresholds=thresholds.to_dict() if thresholds is not None else None,
        stop_reason=traj.stop_reason,
        diagnostics=diag,
    )


# --------------------------------------------------------------------------
# empirical maximum learning rate
# --------------------------------------------------------------------------


@dataclass
class EtaMaxSearch:
    estimate: float
    lower: float
    upper: float
    probes: list

    @property
    def converged_probes(self):
        return [e for e, ok in self.probes if ok]

    @property
    def diverged_probes(self):
        return [e for e, ok in self.probes if not ok]


def _converges(state, data, eta, steps, engine, opt):
    traj = simulate(state, data, eta, steps, opt, engine)
    if traj.stop_reason == "diverged" or not np.all(np.isfinite(traj.loss)):
        return False
    return traj.final_loss < traj.initial_loss


def empirical_eta_max(state, data: Dataset, bracket, steps: int = 1000, engine: str = "gd",
                      rel_width: float = 1e-2, options: RecorderOptions | None = None) -> EtaMaxSearch:
    """Bisect for the largest learning rate at which training still converges.

    A probe converges when it never crosses the divergence threshold and ends
    below its initial loss. The bracket must have a converging lower end and
    a non-converging upper end. Bisection stops at relative width
    ``rel_width``; the estimate is the midpoint of the final bracket, so every
    converging probe lies below it and every failing probe above.
    """
    lo, hi = float(bracket[0]), float(bracket[1])
    if not 0 < lo < hi:
        raise ValueError("bracket must satisfy 0 < low < high")
    opt = options or RecorderOptions(kernel_every=0)
    probes = []
    ok_lo = _converges(state, data, lo, steps, engine, opt)
    probes.append((lo, ok_lo))
    ok_hi = _converges(state, data, hi, steps, engine, opt)
    probes.append((hi, ok_hi))
    if not ok_lo or ok_hi:
        raise ValueError(f"bracket ({lo}, {hi}) does not straddle the convergence boundary")
    while (hi - lo) / lo > rel_width:
        mid = 0.5 * (lo + hi)
        ok = _converges(state, data, mid, steps, engine, opt)
        probes.append((mid, ok))
        if ok:
            lo = mid
        else:
            hi = mid
    return EtaMaxSearch(0.5 * (lo + hi), lo, hi, probes)
