"""Exception types shared across the package."""


class TadaError(Exception):
    """Base class for all tadakv errors."""


class ShapeError(TadaError, ValueError):
    """Operand dimensions do not line up."""


class ConfigError(TadaError, ValueError):
    """Invalid or inconsistent configuration."""


class DataError(TadaError, ValueError):
    """Input values outside the supported domain (non-finite, bad token ids)."""


class FormatError(TadaError, ValueError):
    """Malformed serialized payload: bad magic, truncation, or corruption."""


class StateError(TadaError, RuntimeError):
    """Operation is inconsistent with the current runtime state."""


class CapacityError(TadaError, RuntimeError):
    """A configured capacity limit would be exceeded."""


class BudgetInfeasibleError(TadaError, RuntimeError):
    """No search candidate satisfies the memory budget."""
