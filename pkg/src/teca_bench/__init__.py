"""Desk-scale benchmark for uncertainty-aware enhancer+classifier test-time
adaptation: per-sample logit switching between a raw and an enhanced
prediction branch, gradient-speed synchronization, and frozen enhancer
normalization statistics, layered over standard adaptation baselines and
four streaming evaluation protocols."""

from .errors import (
    ConfigError,
    ContractError,
    IngestionError,
    InputShapeError,
    NumericalError,
    TecaBenchError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "IngestionError",
    "InputShapeError",
    "NumericalError",
    "TecaBenchError",
    "ValidationError",
    "__version__",
]
