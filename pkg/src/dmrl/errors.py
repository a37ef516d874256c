"""Exception types shared across the package."""


class DMRLError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(DMRLError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(DMRLError, ValueError):
    """A documented precondition was violated."""


class ConfigurationError(DMRLError, ValueError):
    """Invalid architecture, hyperparameter or run configuration."""


class FormatError(DMRLError, ValueError):
    """A data or checkpoint file does not follow its binary/text format."""


class ConsistencyError(DMRLError, ValueError):
    """Two inputs that must agree (e.g. image and label counts) do not."""


class NonFiniteLossError(DMRLError, FloatingPointError):
    """Training produced a NaN or infinite loss; carries a diagnostics dict."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
