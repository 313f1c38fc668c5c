"""Exception hierarchy shared by every module."""

from __future__ import annotations


class BayesFedError(Exception):
    """Base class for all errors raised by bayesfed."""


class InvalidArgumentError(BayesFedError, ValueError):
    pass


class IncompatibleShapeError(BayesFedError, ValueError):
    pass


class UnsupportedModelError(BayesFedError, ValueError):
    """A weighting scheme or strategy was asked to handle the wrong model kind."""


class PartitionInfeasibleError(BayesFedError, ValueError):
    pass


class DatasetParseError(BayesFedError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class ConfigError(BayesFedError, ValueError):
    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        self.source = source
        where = ""
        if source is not None:
            where = f"{source}:{line}: " if line is not None else f"{source}: "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


class TrainingDivergedError(BayesFedError, RuntimeError):
    def __init__(self, message: str, client_id: int | None = None, epoch: int | None = None,
                 round_index: int | None = None):
        self.client_id = client_id
        self.epoch = epoch
        self.round_index = round_index
        context = []
        if round_index is not None:
            context.append(f"round {round_index}")
        if client_id is not None:
            context.append(f"client {client_id}")
        if epoch is not None:
            context.append(f"epoch {epoch}")
        suffix = f" ({', '.join(context)})" if context else ""
        super().__init__(message + suffix)
