"""Two-layer ReLU networks, their linear and quadratic Taylor models, and the
learning-rate regimes of gradient descent on them."""

from __future__ import annotations

__version__ = "0.1.0"

from .dynamics import (
    RecorderOptions,
    RegimeReport,
    TrajectoryRecord,
    classify_regime,
    empirical_eta_max,
    gd_step,
    simulate,
)
from .errors import (
    AssumptionError,
    ConfigError,
    DegenerateKernelError,
    DimensionError,
    DivergenceSignal,
    NQMError,
    NumericError,
)
from .kernel import RateThresholds, TangentKernelSnapshot, critical_lr, rank2_eigenstructure, tangent_kernel
from .models import (
    AnchoredModelState,
    Dataset,
    Family,
    GeneralQuadraticModel,
    NetworkParams,
    ntk_initialize,
    predict,
)

__all__ = [
    "AnchoredModelState",
    "AssumptionError",
    "ConfigError",
    "Dataset",
    "DegenerateKernelError",
    "DimensionError",
    "DivergenceSignal",
    "Family",
    "GeneralQuadraticModel",
    "NQMError",
    "NetworkParams",
    "NumericError",
    "RateThresholds",
    "RecorderOptions",
    "RegimeReport",
    "TangentKernelSnapshot",
    "TrajectoryRecord",
    "classify_regime",
    "critical_lr",
    "empirical_eta_max",
    "gd_step",
    "ntk_initialize",
    "predict",
    "rank2_eigenstructure",
    "simulate",
    "tangent_kernel",
]
