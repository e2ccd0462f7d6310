"""Complementary and MEKF attitude filters on SO(3), with simulation and
numerical stability checks."""

__version__ = "0.1.0"

from . import checks, filters, sensors, sim, so3, stability
from .errors import (
    AttikitError,
    ConfigError,
    CovarianceMissing,
    CovarianceNotPD,
    DegenerateEigenvalues,
    DegenerateVector,
    DivergenceDetected,
    GainNotPositiveDefinite,
    NoCertificateFound,
    NoConvergence,
    NotAntisymmetric,
    NotProperRotation,
)
from .filters import (
    ConstantGains,
    FilterState,
    FunctionGains,
    NoiseParams,
    RecordedGains,
    riccati_steady_state,
)
from .sensors import GyroModel, MeasurementFrame, NoiseStream, ObservationModel
from .sim import FilterConfig, Scenario, monte_carlo, run_scenario

__all__ = [
    "checks",
    "filters",
    "sensors",
    "sim",
    "so3",
    "stability",
    "AttikitError",
    "ConfigError",
    "CovarianceMissing",
    "CovarianceNotPD",
    "DegenerateEigenvalues",
    "DegenerateVector",
    "DivergenceDetected",
    "GainNotPositiveDefinite",
    "NoCertificateFound",
    "NoConvergence",
    "NotAntisymmetric",
    "NotProperRotation",
    "ConstantGains",
    "FilterState",
    "FunctionGains",
    "NoiseParams",
    "RecordedGains",
    "riccati_steady_state",
    "GyroModel",
    "MeasurementFrame",
    "NoiseStream",
    "ObservationModel",
    "FilterConfig",
    "Scenario",
    "monte_carlo",
    "run_scenario",
]
