"""Exception hierarchy shared across the package."""


class MDetError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(MDetError):
    """Tensor or box shapes are incompatible with the operation."""


class ConfigError(MDetError):
    """A configuration value violates its contract."""


class ContractError(MDetError):
    """A caller violated an operation precondition."""


class StateError(MDetError):
    """An object was used in an invalid lifecycle state."""


class RegistryError(MDetError):
    """An unknown dataset id or head index was referenced."""


class FormatError(MDetError):
    """A file or byte stream does not match its declared format."""


class GenerationError(MDetError):
    """Synthetic frame generation could not satisfy its constraints."""
