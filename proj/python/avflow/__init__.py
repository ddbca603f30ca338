"""One-step average-velocity generative transport lab.

The C++ core provides the samplers, synthetic worlds, verification metrics
and the training harness; this package re-exports the bound surface.
"""

from ._core import (
    AnalyticKernel,
    Model,
    OracleVelocity,
    RngStream,
    crps_loss,
    crps_w1_relation,
    ensemble_metrics,
    latitude_weights,
    oracle_avg_velocity,
    rectification_residual,
    run,
    sample_path,
    sinusoidal_code,
    wasserstein1_1d,
)

__all__ = [
    "AnalyticKernel",
    "Model",
    "OracleVelocity",
    "RngStream",
    "crps_loss",
    "crps_w1_relation",
    "ensemble_metrics",
    "latitude_weights",
    "oracle_avg_velocity",
    "rectification_residual",
    "run",
    "sample_path",
    "sinusoidal_code",
    "wasserstein1_1d",
]
