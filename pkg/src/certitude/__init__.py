"""Certified robustness bounds and verifiable training for ReLU networks.

Submodules are imported lazily so the CLI can apply the CERTITUDE_THREADS
cap to the BLAS thread pools before numpy loads.
"""

import importlib

from .errors import (
    CapacityError,
    CertitudeError,
    ContractError,
    DimensionError,
    FormatError,
    NumericError,
    ValidationError,
)

__version__ = "0.1.0"

_SUBMODULES = ("autodiff", "crown", "data", "ibp", "model", "oracle", "plots", "training")

__all__ = list(_SUBMODULES) + [
    "CertitudeError",
    "CapacityError",
    "ContractError",
    "DimensionError",
    "FormatError",
    "NumericError",
    "ValidationError",
    "__version__",
]


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
