from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from nqmlab.models import AnchoredModelState, Family, NetworkParams, make_rng, ntk_initialize

settings.register_profile(
    "nqmlab", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("nqmlab")

RELU_FAMILIES = (Family.NETWORK, Family.LINEARIZED, Family.NQM)


def perturbed_state(family, m, d, seed, X=None, scale=0.3):
    """Anchored state whose current parameters sit a random step away from the anchor."""
    anchor = ntk_initialize(m, d, seed)
    rng = make_rng(seed, 77)
    cur = NetworkParams(
        anchor.first_layer + scale * rng.standard_normal(anchor.first_layer.shape),
        anchor.second_layer + scale * rng.standard_normal(anchor.second_layer.shape),
    )
    return AnchoredModelState.create(family, anchor, X, cur)


def fd_gradient(fun, w, h=1e-6):
    """Central differences of a scalar function of a flat vector."""
    out = np.empty_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = h
        out[i] = (fun(w + e) - fun(w - e)) / (2 * h)
    return out


def fd_hessian(fun, w, h=1e-4):
    n = w.size
    H = np.empty((n, n))
    eye = np.eye(n) * h
    for i in range(n):
        for j in range(n):
            H[i, j] = (fun(w + eye[i] + eye[j]) - fun(w + eye[i] - eye[j])
                       - fun(w - eye[i] + eye[j]) + fun(w - eye[i] - eye[j])) / (4 * h * h)
    return H


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
