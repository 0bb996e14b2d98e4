"""Error hierarchy of PySKeB.

Four families map onto the command-line exit codes:

- ``ConfigError``      -> 2
- ``DependencyError``  -> 3
- ``GatewayError``     -> 4 (``ProtocolError`` included)
- ``DataError``        -> 5

Every data error is also a ``ValueError`` so callers that only know the
builtin hierarchy can still catch them.
"""


class SKeBError(Exception):
    """Base class of all PySKeB errors."""

    exit_code = 1


class ConfigError(SKeBError):
    exit_code = 2


class DependencyError(SKeBError):
    """A pipeline stage needs outputs that are not present.

    Parameters
    ----------
    stage : str
        The name of the missing stage.
    """

    exit_code = 3

    def __init__(self, stage: str, msg: str = ""):
        self.stage = stage
        super().__init__(msg or stage)


class GatewayError(SKeBError):
    exit_code = 4


class ProtocolError(GatewayError):
    """The endpoint answered with a body that does not follow the protocol."""


class DataError(SKeBError, ValueError):
    exit_code = 5


# corpus-graph
class InputEmpty(DataError):
    pass


class NoSegments(DataError):
    pass


class FormatError(DataError):
    """A file could not be parsed.

    Parameters
    ----------
    msg : str
        Description of the problem.
    path : str, optional
        The offending file.
    line : int, optional
        1-based line number.
    offset : int or str, optional
        Column, or a JSON location such as ``edges[3]``.
    """

    def __init__(self, msg, path=None, line=None, offset=None):
        self.path = path
        self.line = line
        self.offset = offset
        loc = ":".join(str(i) for i in (path, line, offset) if i is not None)
        super().__init__(f"{loc}: {msg}" if loc else msg)


# entanglement
class UnknownEntity(DataError):
    pass


class EmptySubgraph(DataError):
    pass


class EmptyReferenceSet(DataError):
    pass


# prompt-pipeline
class DuplicateId(DataError):
    pass


class EmptyTransform(DataError):
    pass


# judge-ensemble
class ParseError(DataError):
    pass


class SumViolation(DataError):
    """A judge verdict whose three percentages do not sum to 100.

    The parsed values are kept so that the caller can renormalise them.
    """

    def __init__(self, msg, values=None):
        self.values = values
        super().__init__(msg)


class EscalationError(DataError):
    pass


# analytics
class DegenerateVariance(DataError):
    pass


class ShapeError(DataError):
    pass


class FitDiverged(DataError):
    pass


class DegenerateLabels(DataError):
    pass
