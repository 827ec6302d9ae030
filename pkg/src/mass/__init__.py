"""Selective attribute suppression for embedding datasets."""

from mass.errors import ConfigError, DataError, MassError, NumericalError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "MassError", "NumericalError", "__version__"]
