"""Exception hierarchy shared by the simulation library and the harness."""


class FedSimError(Exception):
    """Base class for every error raised by fedsim."""


class ConfigurationError(FedSimError):
    """Invalid configuration or parameter values."""

    def __init__(self, message, errors=None):
        super().__init__(message)
        self.errors = errors or {}


class StructuralError(FedSimError):
    """Dimension or shape mismatch between vectors, models and data."""


class ProtocolError(FedSimError):
    """An update violates the server protocol (e.g. it comes from a future model)."""


class NumericalError(FedSimError):
    """A non-finite value appeared during local training."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class IngestionError(FedSimError):
    """A dataset file could not be read."""

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line
