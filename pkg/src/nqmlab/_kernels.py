"""Hot numeric kernels.

Every kernel has a vectorised numpy implementation (``*_np``) and a numba
implementation (``*_nb``). The public names dispatch on ``_accel.USE_NUMBA``.
Both variants compute the same algebra; they differ only in summation order.

Conventions shared by all ReLU-family kernels:

* ``X`` is ``(n, d)``, ``U`` is ``(m, d)``, ``v`` is ``(m,)``.
* ``family`` is one of ``NETWORK``, ``LINEARIZED``, ``NQM``.
* ``A0`` is the float 0/1 anchor mask ``1{u0_i . x_k >= 0}``, shape ``(n, m)``;
  ``Z0`` holds the anchor pre-activations ``u0_i . x_k``; ``v0`` the anchor
  second layer. The network family ignores all three.
* Output scale is ``1/sqrt(m d)``; ReLU indicator uses ``z >= 0``.
"""

import numpy as np

from . import _accel
from ._accel import njit

NETWORK = 0
LINEARIZED = 1
NQM = 2


# --------------------------------------------------------------------------
# numpy reference paths
# --------------------------------------------------------------------------


def _effective_np(X, U, v, v0, A0, Z0, family):
    """Mask, effective second layer and effective pre-activations."""
    Z = X @ U.T
    if family == NETWORK:
        A = (Z >= 0.0).astype(np.float64)
        return Z, A, v, Z
    if family == NQM:
        return Z, A0, v, Z
    return Z, A0, v0, Z0


def relu_outputs_np(X, U, v, v0, A0, Z0, family):
    m, d = U.shape
    c = 1.0 / np.sqrt(m * d)
    Z = X @ U.T
    if family == NETWORK:
        return c * (np.maximum(Z, 0.0) @ v)
    if family == NQM:
        return c * ((A0 * Z) @ v)
    return c * ((A0 * Z) @ v0 + (A0 * Z0) @ (v - v0))


def relu_vjp_np(X, r, U, v, v0, A0, Z0, family):
    """``J' r`` split into first-layer ``(m, d)`` and second-layer ``(m,)`` blocks."""
    m, d = U.shape
    c = 1.0 / np.sqrt(m * d)
    _, A, veff, Zeff = _effective_np(X, U, v, v0, A0, Z0, family)
    gv = c * ((A * Zeff).T @ r)
    gU = c * veff[:, None] * ((A * r[:, None]).T @ X)
    return gU, gv


def relu_vjps_np(X, R, U, v, v0, A0, Z0, family):
    """Batched :func:`relu_vjp_np` for the rows of ``R`` ``(k, n)``.

    Returns blocks of shape ``(k, m, d)`` and ``(k, m)``.
    """
    m, d = U.shape
    c = 1.0 / np.sqrt(m * d)
    _, A, veff, Zeff = _effective_np(X, U, v, v0, A0, Z0, family)
    gv = c * (R @ (A * Zeff))
    gU = c * veff[None, :, None] * np.einsum("qn,nm,nd->qmd", R, A, X, optimize=True)
    return gU, gv


def relu_loss_grad_np(X, y, U, v, v0, A0, Z0, family):
    out = relu_outputs_np(X, U, v, v0, A0, Z0, family)
    gU, gv = relu_vjp_np(X, out - y, U, v, v0, A0, Z0, family)
    return out, gU, gv


def relu_jacobian_np(X, U, v, v0, A0, Z0, family):
    n, d = X.shape
    m = U.shape[0]
    c = 1.0 / np.sqrt(m * d)
    _, A, veff, Zeff = _effective_np(X, U, v, v0, A0, Z0, family)
    J = np.empty((n, m * d + m))
    J[:, : m * d] = (c * (A * veff)[:, :, None] * X[:, None, :]).reshape(n, m * d)
    J[:, m * d :] = c * A * Zeff
    return J


def relu_gram_np(X, U, v, v0, A0, Z0, family):
    m, d = U.shape
    _, A, veff, Zeff = _effective_np(X, U, v, v0, A0, Z0, family)
    B = A * Zeff
    K = (X @ X.T) * ((A * (veff * veff)) @ A.T) + B @ B.T
    K /= m * d
    return 0.5 * (K + K.T)


def scalar_recursion_np(g0, lam0, y, eta, c2, steps):
    g = np.empty(steps + 1)
    lam = np.empty(steps + 1)
    g[0], lam[0] = g0, lam0
    for t in range(steps):
        r = g[t] - y
        g[t + 1] = y + (1.0 - eta * lam[t] + c2 * eta * eta * r * g[t]) * r
        lam[t + 1] = lam[t] - eta * c2 * (4.0 * r * g[t] - eta * lam[t] * r * r)
    return g, lam


def uvw_recursion_np(u0, v0, w0, steps):
    u = np.empty(steps + 1)
    v = np.empty(steps + 1)
    w = np.empty(steps + 1)
    kappa = np.empty(steps)
    u[0], v[0], w[0] = u0, v0, w0
    for t in range(steps):
        mu = 1.0 - v[t] + u[t] + w[t]
        kappa[t] = mu * mu
        u[t + 1] = kappa[t] * u[t]
        v[t + 1] = v[t] - u[t] * (4.0 - v[t]) - 4.0 * w[t]
        w[t + 1] = mu * w[t]
    return u, v, w, kappa


def multi_step_np(g, K, y, p1, p2, mplus, mminus, eta, m):
    r = g - y
    rp, rm = r * mplus, r * mminus
    q1 = rp @ (g * mplus)
    q2 = rm @ (g * mminus)
    k1 = rp @ K @ rp
    k2 = rm @ K @ rm
    P1 = np.outer(p1, p1)
    P2 = np.outer(p2, p2)
    Rg = (eta * eta / m) * (q1 * P1 + q2 * P2)
    g_new = y + (r - eta * (K @ r) + Rg @ r)
    RK = (eta * eta / m) * (k1 * P1 + k2 * P2) - (4.0 * eta / m) * (q1 * P1 + q2 * P2)
    return g_new, K + RK


def multi_recursion_np(g0, K0, y, p1, p2, mplus, mminus, eta, m, dirs, steps):
    """Iterate :func:`multi_step_np`.

    Returns the output history ``(steps+1, n)``, the Rayleigh quotients of
    ``K(t)`` along the unit rows of ``dirs`` ``(steps+1, k)`` and the final
    kernel. Only the current kernel is kept in memory.
    """
    n = g0.shape[0]
    G = np.empty((steps + 1, n))
    R = np.empty((steps + 1, dirs.shape[0]))
    G[0] = g0
    K = K0.copy()
    R[0] = np.einsum("ki,ij,kj->k", dirs, K, dirs)
    for t in range(steps):
        G[t + 1], K = multi_step_np(G[t], K, y, p1, p2, mplus, mminus, eta, m)
        R[t + 1] = np.einsum("ki,ij,kj->k", dirs, K, dirs)
    return G, R, K


# --------------------------------------------------------------------------
# numba paths
# --------------------------------------------------------------------------


@njit
def _preact_nb(X, U):
    n, d = X.shape
    m = U.shape[0]
    Z = np.empty((n, m))
    for k in range(n):
        for i in range(m):
            s = 0.0
            for j in range(d):
                s += X[k, j] * U[i, j]
            Z[k, i] = s
    return Z


@njit
def relu_outputs_nb(X, U, v, v0, A0, Z0, family):
    n, d = X.shape
    m = U.shape[0]
    c = 1.0 / np.sqrt(m * d)
    out = np.empty(n)
    for k in range(n):
        s = 0.0
        for i in range(m):
            z = 0.0
            for j in range(d):
                z += X[k, j] * U[i, j]
            if family == 0:
                s += v[i] * max(z, 0.0)
            elif family == 2:
                s += A0[k, i] * v[i] * z
            else:
                s += A0[k, i] * (v0[i] * z + (v[i] - v0[i]) * Z0[k, i])
        out[k] = c * s
    return out


@njit
def relu_vjps_nb(X, R, U, v, v0, A0, Z0, family):
    n, d = X.shape
    m = U.shape[0]
    nq = R.shape[0]
    c = 1.0 / np.sqrt(m * d)
    # accumulate first-layer blocks as (q, d, m) so the neuron loop is unit-stride
    gUt = np.zeros((nq, d, m))
    gv = np.zeros((nq, m))
    arow = np.empty(m)
    zrow = np.empty(m)
    for k in range(n):
        for i in range(m):
            z = 0.0
            for j in range(d):
                z += X[k, j] * U[i, j]
            if family == 0:
                arow[i] = 1.0 if z >= 0.0 else 0.0
                zrow[i] = z
            elif family == 2:
                arow[i] = A0[k, i]
                zrow[i] = z
            else:
                arow[i] = A0[k, i]
                zrow[i] = Z0[k, i]
        for q in range(nq):
            rq = R[q, k]
            for i in range(m):
                gv[q, i] += rq * arow[i] * zrow[i]
            for j in range(d):
                xr = rq * X[k, j]
                for i in range(m):
                    gUt[q, j, i] += xr * arow[i]
    gU = np.empty((nq, m, d))
    for q in range(nq):
        for i in range(m):
            scale = c * (v0[i] if family == 1 else v[i])
            gv[q, i] *= c
            for j in range(d):
                gU[q, i, j] = gUt[q, j, i] * scale
    return gU, gv


@njit
def relu_vjp_nb(X, r, U, v, v0, A0, Z0, family):
    R = np.empty((1, r.shape[0]))
    R[0] = r
    gU, gv = relu_vjps_nb(X, R, U, v, v0, A0, Z0, family)
    return gU[0], gv[0]


@njit
def relu_loss_grad_nb(X, y, U, v, v0, A0, Z0, family):
    out = relu_outputs_nb(X, U, v, v0, A0, Z0, family)
    gU, gv = relu_vjp_nb(X, out - y, U, v, v0, A0, Z0, family)
    return out, gU, gv


@njit
def relu_jacobian_nb(X, U, v, v0, A0, Z0, family):
    n, d = X.shape
    m = U.shape[0]
    c = 1.0 / np.sqrt(m * d)
    Z = _preact_nb(X, U)
    J = np.zeros((n, m * d + m))
    for k in range(n):
        for i in range(m):
            if family == 0:
                a = 1.0 if Z[k, i] >= 0.0 else 0.0
                zeff = Z[k, i]
                veff = v[i]
            elif family == 2:
                a = A0[k, i]
                zeff = Z[k, i]
                veff = v[i]
            else:
                a = A0[k, i]
                zeff = Z0[k, i]
                veff = v0[i]
            if a != 0.0:
                for j in range(d):
                    J[k, i * d + j] = c * veff * X[k, j]
                J[k, m * d + i] = c * zeff
    return J


@njit
def relu_gram_nb(X, U, v, v0, A0, Z0, family):
    n, d = X.shape
    m = U.shape[0]
    Z = _preact_nb(X, U)
    A = np.empty((n, m))
    B = np.empty((n, m))
    for k in range(n):
        for i in range(m):
            if family == 0:
                a = 1.0 if Z[k, i] >= 0.0 else 0.0
                zeff = Z[k, i]
            elif family == 2:
                a = A0[k, i]
                zeff = Z[k, i]
            else:
                a = A0[k, i]
                zeff = Z0[k, i]
            A[k, i] = a
            B[k, i] = a * zeff
    Av = np.empty((n, m))
    for i in range(m):
        ve = v0[i] if family == 1 else v[i]
        for k in range(n):
            Av[k, i] = A[k, i] * ve * ve
    # the two n x m by m x n products go through BLAS
    K = (np.dot(X, X.T) * np.dot(Av, A.T) + np.dot(B, B.T)) / (m * d)
    return 0.5 * (K + K.T)


@njit
def scalar_recursion_nb(g0, lam0, y, eta, c2, steps):
    g = np.empty(steps + 1)
    lam = np.empty(steps + 1)
    g[0] = g0
    lam[0] = lam0
    for t in range(steps):
        r = g[t] - y
        g[t + 1] = y + (1.0 - eta * lam[t] + c2 * eta * eta * r * g[t]) * r
        lam[t + 1] = lam[t] - eta * c2 * (4.0 * r * g[t] - eta * lam[t] * r * r)
    return g, lam


@njit
def uvw_recursion_nb(u0, v0, w0, steps):
    u = np.empty(steps + 1)
    v = np.empty(steps + 1)
    w = np.empty(steps + 1)
    kappa = np.empty(steps)
    u[0] = u0
    v[0] = v0
    w[0] = w0
    for t in range(steps):
        mu = 1.0 - v[t] + u[t] + w[t]
        kappa[t] = mu * mu
        u[t + 1] = kappa[t] * u[t]
        v[t + 1] = v[t] - u[t] * (4.0 - v[t]) - 4.0 * w[t]
        w[t + 1] = mu * w[t]
    return u, v, w, kappa


@njit
def multi_recursion_nb(g0, K0, y, p1, p2, mplus, mminus, eta, m, dirs, steps):
    n = g0.shape[0]
    nd = dirs.shape[0]
    G = np.empty((steps + 1, n))
    R = np.empty((steps + 1, nd))
    G[0] = g0
    K = K0.copy()
    for a in range(nd):
        R[0, a] = dirs[a] @ (K @ dirs[a])
    for t in range(steps):
        g = G[t]
        r = g - y
        q1 = 0.0
        q2 = 0.0
        for i in range(n):
            q1 += r[i] * mplus[i] * g[i] * mplus[i]
            q2 += r[i] * mminus[i] * g[i] * mminus[i]
        Kr = K @ r
        rp = r * mplus
        rm = r * mminus
        k1 = rp @ (K @ rp)
        k2 = rm @ (K @ rm)
        a1 = p1 @ r
        a2 = p2 @ r
        s = eta * eta / m
        for i in range(n):
            G[t + 1, i] = y[i] + r[i] - eta * Kr[i] + s * (q1 * p1[i] * a1 + q2 * p2[i] * a2)
        c1 = s * k1 - 4.0 * eta / m * q1
        c2 = s * k2 - 4.0 * eta / m * q2
        for i in range(n):
            for j in range(n):
                K[i, j] += c1 * p1[i] * p1[j] + c2 * p2[i] * p2[j]
        for a in range(nd):
            R[t + 1, a] = dirs[a] @ (K @ dirs[a])
    return G, R, K


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------


def _pick(np_impl, nb_impl):
    def dispatch(*args):
        if _accel.USE_NUMBA:
            return nb_impl(*args)
        return np_impl(*args)

    dispatch.__name__ = np_impl.__name__[:-3]
    dispatch.__doc__ = np_impl.__doc__
    return dispatch


def preact_np(X, U):
    return X @ U.T


# pre-activations computed with the same summation order as the kernels, so
# anchor caches agree bitwise with in-kernel values at current = anchor
preact = _pick(preact_np, _preact_nb)
relu_outputs = _pick(relu_outputs_np, relu_outputs_nb)
relu_vjp = _pick(relu_vjp_np, relu_vjp_nb)
relu_vjps = _pick(relu_vjps_np, relu_vjps_nb)
relu_loss_grad = _pick(relu_loss_grad_np, relu_loss_grad_nb)
relu_jacobian = _pick(relu_jacobian_np, relu_jacobian_nb)
relu_gram = _pick(relu_gram_np, relu_gram_nb)
scalar_recursion = _pick(scalar_recursion_np, scalar_recursion_nb)
uvw_recursion = _pick(uvw_recursion_np, uvw_recursion_nb)
multi_recursion = _pick(multi_recursion_np, multi_recursion_nb)
