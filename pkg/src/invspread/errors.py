"""Exception types shared across the package."""


class InvSpreadError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(InvSpreadError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericDomainError(InvSpreadError, ArithmeticError):
    """A value fell outside the domain an operation is defined on."""


class ContractError(InvSpreadError, ValueError):
    """A documented precondition of a public function was violated."""


class FormatError(InvSpreadError, ValueError):
    """A binary file does not follow its documented layout.

    ``offset`` is the byte position at which the problem was detected, when known.
    """

    def __init__(self, message: str, offset: int | None = None, path=None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class IngestionError(InvSpreadError, OSError):
    """A dataset file is missing or unreadable."""


class VersionError(FormatError):
    """A checkpoint was written by an incompatible format version."""


class IncompatibleCheckpointError(InvSpreadError, ValueError):
    """Checkpoint tensors do not match the configured encoder."""


class ConfigError(InvSpreadError, ValueError):
    """A run configuration failed validation.

    ``field`` is the dotted path of the offending key and ``line`` its line in
    the source file when that is known.
    """

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.message = message
        self.field = field
        self.line = line
        prefix = ""
        if line is not None:
            prefix += f"line {line}: "
        if field:
            prefix += f"{field}: "
        super().__init__(prefix + message)


class TrainingAborted(InvSpreadError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, epoch: int, batch: int, seed: int):
        self.epoch = epoch
        self.batch = batch
        self.seed = seed
        super().__init__(f"{message} (epoch {epoch}, batch {batch}, master_seed {seed})")
