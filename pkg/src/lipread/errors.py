"""Exception types shared across the package."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericalError(FloatingPointError):
    """A computation produced or consumed NaN/Inf values."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class CheckError(RuntimeError):
    """A verification harness could not produce a trustworthy result."""


class TrainingError(RuntimeError):
    """Training aborted, typically on a non-finite loss component."""
