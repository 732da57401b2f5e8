"""Dense visible-thermal image registration.

The pipeline splits each image into low- and high-frequency bands with a
guided filter, encodes self- and cross-correlation features over both
bands, turns feature correlation into a dense flow with a differentiable
matching layer and refines that flow to full resolution.
"""

__version__ = "0.1.0"

from .autodiff import Graph, Tensor, backward, set_finite_checks
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    NumericError,
    RegistrationError,
    SchemaError,
)

__all__ = [
    "Graph",
    "Tensor",
    "backward",
    "set_finite_checks",
    "ConfigError",
    "ContractError",
    "DataError",
    "NumericError",
    "RegistrationError",
    "SchemaError",
    "__version__",
]
