"""Exception hierarchy shared by every fragmix module.

Each error carries the process exit code the command-line driver reports for it.
"""
from typing import Optional


class FragmixError(Exception):
    """Base class for all errors raised by fragmix"""
    exit_code = 1

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class ConfigError(FragmixError):
    """Invalid or contradictory configuration"""
    exit_code = 2


class UsageError(FragmixError):
    """Invalid command-line usage"""
    exit_code = 2


class UnsupportedCombinationError(FragmixError):
    """Two options were requested together that cannot be honoured together"""
    exit_code = 2


class DimensionError(FragmixError):
    """Tensor shapes or axes do not fit the requested operation"""

    def __init__(self, message: str, *shapes):
        if shapes:
            message = f"{message} (shapes: {', '.join(str(tuple(s)) for s in shapes)})"
        super().__init__(message)
        self.shapes = shapes


class SymmetryError(FragmixError):
    """A matrix that must be symmetric is not"""


class InputError(FragmixError):
    """Input data is invalid (non-finite coordinates, broken topology, ...)"""


class GraphError(FragmixError):
    """Graph connectivity does not match the node set"""


class FormatError(FragmixError):
    """A file does not follow its binary or text format"""

    def __init__(self, message: str, offset: Optional[int] = None, path: Optional[str] = None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        if where:
            message = f"{message} [{', '.join(where)}]"
        super().__init__(message)
        self.offset = offset
        self.path = path


class DegenerateFeaturesError(FragmixError):
    """Covariance matrix has no eigenvalue above the truncation threshold"""


class NumericalFailureError(FragmixError):
    """A loss or score became non-finite"""

    def __init__(self, message: str, term: Optional[str] = None, **diagnostics):
        details = dict(diagnostics)
        if term is not None:
            details = {"term": term, **details}
        if details:
            message = f"{message} ({', '.join(f'{k}={v}' for k, v in details.items())})"
        super().__init__(message)
        self.term = term
        self.diagnostics = diagnostics


class SplitError(FragmixError):
    """Train/validation split cannot be formed"""


class IntegrationError(FragmixError):
    """Langevin integration is unstable or produced non-finite values"""
