"""Exception hierarchy shared by every fedstock module."""


class FedstockError(Exception):
    """Base class for all fedstock errors."""


class DimensionError(FedstockError, ValueError):
    pass


class IndexingError(FedstockError, IndexError):
    pass


class ArgumentError(FedstockError, ValueError):
    pass


class EmptySequenceError(FedstockError, ValueError):
    pass


class ConfigError(FedstockError, ValueError):
    """Invalid configuration; ``path`` names the offending field when known."""

    def __init__(self, message: str, path: str | None = None):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class NumericError(FedstockError, FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""

    def __init__(self, message: str, where: str | None = None):
        super().__init__(message)
        self.where = where


class TrainingDivergence(NumericError):
    def __init__(self, client_id, epoch: int, round_index: int | None = None):
        where = f"client {client_id}, epoch {epoch}"
        if round_index is not None:
            where = f"{where}, round {round_index}"
        super().__init__(f"non-finite loss ({where})", where=where)
        self.client_id = client_id
        self.epoch = epoch
        self.round_index = round_index


class ProtocolError(FedstockError, RuntimeError):
    """Federation protocol violated (structural mismatch, head leak, ...)."""
