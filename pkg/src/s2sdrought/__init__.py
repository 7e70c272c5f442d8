"""Subseasonal drought forecasting with a cross-scale attention emulator.

Subpackages are imported lazily by the user; this module only carries the
version and the most common entry points.
"""
__version__ = "0.1.0"

from .catalog import DEFAULT_CATALOG, Role, VariableCatalog  # noqa: E402
from .model import CrossFormer, ModelConfig, UpsampleMethod  # noqa: E402

__all__ = ["__version__", "DEFAULT_CATALOG", "Role", "VariableCatalog", "CrossFormer", "ModelConfig", "UpsampleMethod"]
