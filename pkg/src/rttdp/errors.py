"""Exception hierarchy shared by every subsystem."""


class RttdpError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(RttdpError, ValueError):
    pass


class NumericsError(RttdpError, FloatingPointError):
    pass


class ContractError(RttdpError, ValueError):
    """A caller violated an operation's precondition."""


class SingularCovarianceError(NumericsError):
    pass


class DegenerateBatchError(ContractError):
    pass


class FormatError(RttdpError, ValueError):
    """Corrupt, truncated or mismatched file contents."""


class AuditError(RttdpError, RuntimeError):
    """The grey-box threat model was violated by the harness."""


class TrainingDivergedError(RttdpError, RuntimeError):
    pass


class ConfigError(RttdpError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        self.detail = message
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
