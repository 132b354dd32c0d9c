"""Exception types shared across the package.

The CLI maps ``ConfigurationError`` to exit code 2 and ``NumericError`` to 3.
"""


class ConfigurationError(ValueError):
    """Invalid configuration, unknown task, empty dataset, or similar."""


class StageOrderError(ConfigurationError):
    """A pipeline stage was requested before its prerequisites exist."""

    def __init__(self, stage: str, missing: str):
        super().__init__(f"stage {stage!r} requires missing artifact {missing!r}")
        self.stage = stage
        self.missing = missing


class NumericError(ArithmeticError):
    """A loss or prediction became non-finite."""


class ContractViolation(ValueError):
    """Input shapes do not match the declared layout."""


class EnvironmentAccessError(RuntimeError):
    """The true environment was touched where only the learned simulator is allowed."""
