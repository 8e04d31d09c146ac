"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """An operation was called outside its stated contract."""


class DegenerateSeedError(ValueError):
    """The spherical link received an all-zero seed vector."""


class IngestionError(ValueError):
    """Input data violates the declared value range."""


class SpecError(ValueError):
    """A network description is internally inconsistent."""


class FormatError(ValueError):
    """A dataset or checkpoint file does not match its binary layout."""


class ConfigError(ValueError):
    """A run configuration could not be parsed."""


class TrainingAbort(RuntimeError):
    """Training stopped because a non-finite value appeared."""
