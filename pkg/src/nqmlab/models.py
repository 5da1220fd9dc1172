"""Model families: two-layer ReLU network, its linearization, its neural
quadratic model (NQM), and general quadratic models.

Parameters are flattened as ``w = [vec(U); v]`` with ``vec`` row-major, so
neuron ``i`` owns entries ``i*d .. i*d+d-1`` of the first block and entry
``m*d + i`` of the second.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import _kernels
from .errors import DimensionError, NumericError

CHECKPOINT_FORMAT = "nqmlab-checkpoint"
CHECKPOINT_VERSION = 1


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """PCG64 generator for ``(seed, stream)``.

    Substreams come from a fixed offset in the seed sequence, so a run's
    randomness does not depend on what else ran before it.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream)]))


class Family(str, Enum):
    NETWORK = "network"
    LINEARIZED = "linearized"
    NQM = "nqm"
    GQM = "gqm"

    @property
    def code(self) -> int:
        return {
            Family.NETWORK: _kernels.NETWORK,
            Family.LINEARIZED: _kernels.LINEARIZED,
            Family.NQM: _kernels.NQM,
        }[self]


@dataclass(frozen=True)
class Dataset:
    """Inputs ``(n, d)`` and real labels ``(n,)``."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        X = np.ascontiguousarray(np.atleast_2d(np.asarray(self.inputs, dtype=np.float64)))
        y = np.ascontiguousarray(np.asarray(self.labels, dtype=np.float64).reshape(-1))
        if X.shape[0] != y.shape[0]:
            raise DimensionError(f"{X.shape[0]} inputs but {y.shape[0]} labels")
        if X.shape[0] < 1:
            raise DimensionError("dataset needs at least one example")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise NumericError("dataset contains non-finite values")
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def d(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.inputs[idx], self.labels[idx])


@dataclass(frozen=True)
class NetworkParams:
    """First layer ``U`` of shape ``(m, d)`` and second layer ``v`` of shape ``(m,)``."""

    first_layer: np.ndarray
    second_layer: np.ndarray

    def __post_init__(self):
        U = np.ascontiguousarray(np.asarray(self.first_layer, dtype=np.float64))
        v = np.ascontiguousarray(np.asarray(self.second_layer, dtype=np.float64).reshape(-1))
        if U.ndim != 2 or U.shape[0] != v.shape[0] or U.shape[0] < 1 or U.shape[1] < 1:
            raise DimensionError(f"first_layer {U.shape} incompatible with second_layer {v.shape}")
        if not (np.all(np.isfinite(U)) and np.all(np.isfinite(v))):
            raise NumericError("network parameters must be finite")
        object.__setattr__(self, "first_layer", U)
        object.__setattr__(self, "second_layer", v)

    @property
    def m(self) -> int:
        return self.first_layer.shape[0]

    @property
    def d(self) -> int:
        return self.first_layer.shape[1]

    @property
    def size(self) -> int:
        return self.m * (self.d + 1)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.first_layer.reshape(-1), self.second_layer])

    @classmethod
    def from_flat(cls, w, m: int, d: int) -> "NetworkParams":
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (m * (d + 1),):
            raise DimensionError(f"flat vector of shape {w.shape} does not fit m={m}, d={d}")
        return cls(w[: m * d].reshape(m, d), w[m * d :])


def ntk_initialize(m: int, d: int, seed: int) -> NetworkParams:
    """NTK-style initialization: ``U_ij ~ N(0, 1)``, ``v_i`` uniform on {-1, +1}."""
    if m < 1 or d < 1:
        raise DimensionError("width and input dimension must be positive")
    rng = make_rng(seed)
    U = rng.standard_normal((m, d))
    v = rng.choice(np.array([-1.0, 1.0]), size=m)
    return NetworkParams(U, v)


_EMPTY2 = np.empty((0, 0))


@dataclass(frozen=True)
class AnchoredModelState:
    """Current parameters plus the frozen anchor ``w0`` they are expanded around.

    For the linearized and NQM families the ReLU masks come from the anchor.
    Anchor pre-activations and masks for the training inputs are cached at
    construction; other inputs get them recomputed on the fly.
    """

    family: Family
    current: NetworkParams
    anchor: NetworkParams
    train_inputs: Optional[np.ndarray] = None
    anchor_preact: Optional[np.ndarray] = field(default=None, repr=False)
    anchor_mask: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def create(cls, family, anchor: NetworkParams, train_inputs=None, current=None):
        family = Family(family)
        if family is Family.GQM:
            raise ValueError("use GeneralQuadraticModel for the gqm family")
        current = anchor if current is None else current
        if (current.m, current.d) != (anchor.m, anchor.d):
            raise DimensionError("current and anchor parameters differ in shape")
        Z0 = A0 = X = None
        if train_inputs is not None:
            X = _as_inputs(train_inputs, anchor.d)
            X.setflags(write=False)
            Z0 = _kernels.preact(X, anchor.first_layer)
            A0 = (Z0 >= 0.0).astype(np.float64)
        return cls(family, current, anchor, X, Z0, A0)

    @property
    def m(self) -> int:
        return self.anchor.m

    @property
    def d(self) -> int:
        return self.anchor.d

    def with_current(self, current: NetworkParams) -> "AnchoredModelState":
        return replace(self, current=current)

    def displacement(self) -> np.ndarray:
        return self.current.flat() - self.anchor.flat()

    def anchor_arrays(self, X: np.ndarray):
        """``(v0, A0, Z0)`` for inputs ``X``, from cache when ``X`` is the training set."""
        if self.family is Family.NETWORK:
            return self.anchor.second_layer, _EMPTY2, _EMPTY2
        if self.train_inputs is not None and (
            X is self.train_inputs
            or (X.shape == self.train_inputs.shape and np.array_equal(X, self.train_inputs))
        ):
            return self.anchor.second_layer, self.anchor_mask, self.anchor_preact
        Z0 = _kernels.preact(X, self.anchor.first_layer)
        return self.anchor.second_layer, (Z0 >= 0.0).astype(np.float64), Z0

    def kernel_args(self, X: np.ndarray):
        v0, A0, Z0 = self.anchor_arrays(X)
        return X, self.current.first_layer, self.current.second_layer, v0, A0, Z0, self.family.code


def _as_inputs(X, d: int) -> np.ndarray:
    X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=np.float64)))
    if X.shape[1] != d:
        raise DimensionError(f"inputs have dimension {X.shape[1]}, model expects {d}")
    return X


def _as_vector(x, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape != (d,):
        raise DimensionError(f"input has shape {x.shape}, model expects ({d},)")
    return x


def _require(state: AnchoredModelState, family: Family):
    if state.family is not family:
        raise ValueError(f"expected a {family.value} state, got {state.family.value}")


def predict(state: AnchoredModelState, X) -> np.ndarray:
    """Outputs of the state's family on every row of ``X``."""
    if isinstance(X, Dataset):
        X = X.inputs
    X = X if X is state.train_inputs else _as_inputs(X, state.d)
    args = state.kernel_args(X)
    return _kernels.relu_outputs(*args)


def network_forward(state: AnchoredModelState, x) -> float:
    _require(state, Family.NETWORK)
    x = _as_vector(x, state.d)
    p = state.current
    z = p.first_layer @ x
    return float(p.second_layer @ np.maximum(z, 0.0) / np.sqrt(p.m * p.d))


def linearized_forward(state: AnchoredModelState, x) -> float:
    """``f(w0; x) + (w - w0) . grad f(w0; x)``."""
    _require(state, Family.LINEARIZED)
    x = _as_vector(x, state.d)
    net0 = AnchoredModelState.create(Family.NETWORK, state.anchor)
    f0 = network_forward(net0, x)
    g0 = model_gradient(net0, x)
    return float(f0 + state.displacement() @ g0)


def nqm_forward(state: AnchoredModelState, x) -> float:
    """Anchor value, two first-order corrections and the bilinear cross term."""
    _require(state, Family.NQM)
    x = _as_vector(x, state.d)
    m, d = state.m, state.d
    c = 1.0 / np.sqrt(m * d)
    U0, v0 = state.anchor.first_layer, state.anchor.second_layer
    dU = state.current.first_layer - U0
    dv = state.current.second_layer - v0
    z0 = U0 @ x
    mask = (z0 >= 0.0).astype(np.float64)
    dz = dU @ x
    anchor_value = c * (v0 @ np.maximum(z0, 0.0))
    first_layer_term = c * np.sum(v0 * dz * mask)
    second_layer_term = c * (dv @ np.maximum(z0, 0.0))
    cross_term = c * np.sum(dv * dz * mask)
    return float(anchor_value + first_layer_term + second_layer_term + cross_term)


def model_gradient(state: AnchoredModelState, x) -> np.ndarray:
    """Closed-form gradient of the family's forward map w.r.t. current parameters."""
    x = _as_vector(x, state.d)
    return _kernels.relu_jacobian(*state.kernel_args(x[None, :]))[0]


def model_jacobian(state: AnchoredModelState, X) -> np.ndarray:
    """Per-example gradients stacked as rows, shape ``(n, m*(d+1))``."""
    X = X if X is state.train_inputs else _as_inputs(X, state.d)
    return _kernels.relu_jacobian(*state.kernel_args(X))


def hessian_vector_product(state: AnchoredModelState, x, z) -> np.ndarray:
    """``H_f(w0; x) @ z`` without materialising the Hessian.

    Only the mixed first/second-layer block is nonzero, so the product costs
    ``O(m d)``.
    """
    x = _as_vector(x, state.d)
    m, d = state.m, state.d
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (m * (d + 1),):
        raise DimensionError("direction has the wrong length")
    c = 1.0 / np.sqrt(m * d)
    mask = (state.anchor.first_layer @ x >= 0.0).astype(np.float64)
    zU = z[: m * d].reshape(m, d)
    zv = z[m * d :]
    out = np.empty_like(z)
    out[: m * d] = (c * (mask * zv)[:, None] * x[None, :]).reshape(-1)
    out[m * d :] = c * mask * (zU @ x)
    return out


def hessian_vector_products(state: AnchoredModelState, X, Z) -> np.ndarray:
    """Row ``k`` is ``H_f(w0; x_k) @ Z[k]`` (``Z`` may be a single vector)."""
    X = _as_inputs(X, state.d)
    n = X.shape[0]
    m, d = state.m, state.d
    Z = np.broadcast_to(np.asarray(Z, dtype=np.float64), (n, m * (d + 1)))
    c = 1.0 / np.sqrt(m * d)
    _, A0, _ = AnchoredModelState.create(Family.NQM, state.anchor).anchor_arrays(X)
    zU = Z[:, : m * d].reshape(n, m, d)
    zv = Z[:, m * d :]
    out = np.empty((n, m * (d + 1)))
    out[:, : m * d] = (c * (A0 * zv)[:, :, None] * X[:, None, :]).reshape(n, m * d)
    out[:, m * d :] = c * A0 * np.einsum("kmd,kd->km", zU, X)
    return out


def squared_loss(outputs, labels) -> float:
    r = np.asarray(outputs) - np.asarray(labels)
    return 0.5 * float(r @ r)


# --------------------------------------------------------------------------
# general quadratic models
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GeneralQuadraticModel:
    """``g(w; x) = w . phi(x) + gamma/2 * w' Sigma(x) w``.

    ``sigma(x)`` may return a 1-D array, read as the diagonal of ``Sigma(x)``.
    ``reference_input`` holds the training input for instances that come with
    one (random instances, embedded linear networks).
    """

    w: np.ndarray
    phi: Callable[[np.ndarray], np.ndarray]
    sigma: Callable[[np.ndarray], np.ndarray]
    gamma: float
    reference_input: Optional[np.ndarray] = None

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64).reshape(-1)
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        object.__setattr__(self, "w", w)

    @property
    def p(self) -> int:
        return self.w.shape[0]

    def with_weights(self, w) -> "GeneralQuadraticModel":
        return replace(self, w=np.asarray(w, dtype=np.float64))

    def features(self, x) -> np.ndarray:
        f = np.asarray(self.phi(x), dtype=np.float64).reshape(-1)
        if f.shape != (self.p,):
            raise DimensionError(f"phi(x) has length {f.shape[0]}, weights have {self.p}")
        return f

    def curvature(self, x) -> np.ndarray:
        S = np.asarray(self.sigma(x), dtype=np.float64)
        if S.shape not in ((self.p,), (self.p, self.p)):
            raise DimensionError(f"Sigma(x) has shape {S.shape}, weights have length {self.p}")
        if S.ndim == 2 and not np.allclose(S, S.T, rtol=0.0, atol=1e-12 * max(1.0, np.max(np.abs(S)))):
            raise ValueError("Sigma(x) must be symmetric")
        return S


def _apply_curvature(S: np.ndarray, w: np.ndarray) -> np.ndarray:
    return S * w if S.ndim == 1 else S @ w


def gqm_forward(model: GeneralQuadraticModel, x) -> float:
    w = model.w
    Sw = _apply_curvature(model.curvature(x), w)
    return float(w @ model.features(x) + 0.5 * model.gamma * (w @ Sw))


def gqm_gradient(model: GeneralQuadraticModel, x) -> np.ndarray:
    """``phi(x) + gamma Sigma(x) w`` (``Sigma`` symmetric)."""
    return model.features(x) + model.gamma * _apply_curvature(model.curvature(x), model.w)


def _zero_features(p):
    return lambda x: np.zeros(p)


def build_linear_net_as_gqm(U, v, x) -> GeneralQuadraticModel:
    """Two-layer linear network ``v' U x / sqrt(m)`` written as a quadratic model.

    Weights are ``[vec(U); v]``, features vanish, ``gamma = 1/sqrt(m)`` and the
    curvature is the symmetric block matrix coupling ``vec(U)`` with ``v``
    through ``I_m (x) x``.
    """
    U = np.asarray(U, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if U.ndim != 2 or U.shape[0] != v.shape[0]:
        raise DimensionError("U must be (m, d) and v length m")
    m, d = U.shape
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape != (d,):
        raise DimensionError("input dimension does not match U")

    def sigma(z):
        z = np.asarray(z, dtype=np.float64).reshape(-1)
        block = np.kron(np.eye(m), z.reshape(d, 1))
        S = np.zeros((m * d + m, m * d + m))
        S[: m * d, m * d :] = block
        S[m * d :, : m * d] = block.T
        return S

    w = np.concatenate([U.reshape(-1), v])
    return GeneralQuadraticModel(w, _zero_features(w.size), sigma, 1.0 / np.sqrt(m), x)


def build_random_gqm(p: int = 100, seed: int = 0, gamma: float = 1e-3) -> GeneralQuadraticModel:
    """Random instance: ``phi(x) = x/|x|``, diagonal ``Sigma`` with +-1 entries.

    The training input ``x ~ N(0, I_p)`` is kept as ``reference_input``; the
    weights start at ``N(0, I_p)``.
    """
    if p < 1:
        raise DimensionError("p must be positive")
    rng = make_rng(seed)
    x = rng.standard_normal(p)
    diag = rng.choice(np.array([-1.0, 1.0]), size=p)
    w = rng.standard_normal(p)

    def phi(z):
        z = np.asarray(z, dtype=np.float64).reshape(-1)
        return z / np.linalg.norm(z)

    return GeneralQuadraticModel(w, phi, lambda z: diag, gamma, x)


def build_phi0_gqm(p: int = 1000, seed: int = 0, xnorm: float = 1.0, gamma=None):
    """Pure quadratic instance with ``phi = 0`` and ``Sigma^2 = |x|^2 I``.

    ``Sigma = |x| Q D Q'`` with ``Q`` random orthogonal and ``D`` random signs.
    The default ``gamma = 1/(|x| sqrt(p))`` puts the initial kernel near 1.
    """
    rng = make_rng(seed, 1)
    Q, _ = np.linalg.qr(rng.standard_normal((p, p)))
    D = rng.choice(np.array([-1.0, 1.0]), size=p)
    S = xnorm * (Q * D) @ Q.T
    S = 0.5 * (S + S.T)
    w = rng.standard_normal(p)
    if gamma is None:
        gamma = 1.0 / (xnorm * np.sqrt(p))
    x = np.zeros(p)
    x[0] = xnorm
    return GeneralQuadraticModel(w, _zero_features(p), lambda z: S, float(gamma), x)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def _encode(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"dtype": "<f8", "shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode(blob: dict) -> np.ndarray:
    if blob.get("dtype") != "<f8":
        raise ValueError(f"unsupported dtype {blob.get('dtype')!r}")
    raw = base64.b64decode(blob["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(blob["shape"]).astype(np.float64)


def save_checkpoint(state: AnchoredModelState, path, seed=None) -> Path:
    """Write a JSON checkpoint.

    Arrays are stored as base64 of little-endian float64 bytes (row-major)
    so the round trip is exact. Cached anchor activations are not stored;
    pass ``train_inputs`` to :func:`load_checkpoint` to rebuild them.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "family": state.family.value,
        "m": state.m,
        "d": state.d,
        "seed": seed,
        "current": {
            "first_layer": _encode(state.current.first_layer),
            "second_layer": _encode(state.current.second_layer),
        },
        "anchor": {
            "first_layer": _encode(state.anchor.first_layer),
            "second_layer": _encode(state.anchor.second_layer),
        },
    }
    path = Path(path)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path


def load_checkpoint(path, train_inputs=None):
    """Returns ``(state, seed)``."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an nqmlab checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    cur = NetworkParams(_decode(doc["current"]["first_layer"]), _decode(doc["current"]["second_layer"]))
    anc = NetworkParams(_decode(doc["anchor"]["first_layer"]), _decode(doc["anchor"]["second_layer"]))
    if (anc.m, anc.d) != (doc["m"], doc["d"]):
        raise DimensionError("checkpoint dimensions disagree with stored arrays")
    state = AnchoredModelState.create(doc["family"], anc, train_inputs=train_inputs, current=cur)
    return state, doc.get("seed")
