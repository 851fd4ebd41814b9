"""Exception hierarchy shared by all modules."""


class FedBucketError(Exception):
    """Base class for every error raised by this package."""


class InputError(FedBucketError, ValueError):
    """Arguments violate an operation's preconditions (shape, range, emptiness)."""


class DegenerateRangeError(InputError):
    """A codebook was requested over an empty or zero-width value range."""


class CorruptPayloadError(FedBucketError):
    """A payload or quantised update is inconsistent with its codebook or header."""


class FormatError(FedBucketError):
    """An on-disk file (IDX) is malformed."""


class PartitionInfeasibleError(FedBucketError):
    """Dirichlet partitioning could not give every client at least one sample."""


class ConfigError(FedBucketError):
    """Experiment configuration failed validation.

    ``line`` is the 1-based line of the offending key in the source file, when known.
    """

    def __init__(self, message: str, *, field: str | None = None, line: int | None = None,
                 source: str | None = None):
        self.field = field
        self.line = line
        self.source = source
        super().__init__(message)

    def __str__(self) -> str:
        msg = super().__str__()
        if self.field:
            msg = f"{self.field}: {msg}"
        if self.line is not None:
            msg = f"{self.source or '<config>'}:{self.line}: {msg}"
        elif self.source:
            msg = f"{self.source}: {msg}"
        return msg


class TrainingDivergedError(FedBucketError):
    """SGD produced non-finite parameters."""
