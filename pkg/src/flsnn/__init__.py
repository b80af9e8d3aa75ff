"""Federated learning for networked probabilistic spiking neural networks."""

from flsnn.errors import ConfigurationError, DimensionError, RasterFormatError
from flsnn.spike_core import (
    BasisSet,
    GLMNetwork,
    ModelParams,
    NetworkTopology,
    TraceState,
    log_spike_probability,
    make_raised_cosine_basis,
    membrane_potential,
    sample_spike,
    spike_probability,
    update_traces,
)

__version__ = "0.1.0"
