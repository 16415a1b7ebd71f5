"""Unsupervised embedding learning by instance discrimination with a two-branch encoder."""

from .errors import (
    ConfigError,
    ContractError,
    FormatError,
    IncompatibleCheckpointError,
    IngestionError,
    InvSpreadError,
    NumericDomainError,
    ShapeError,
    TrainingAborted,
    VersionError,
)

__version__ = "0.1.0"
