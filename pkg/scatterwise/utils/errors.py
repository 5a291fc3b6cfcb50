"""
Exception hierarchy for scatterwise

Every error carries the process exit code the CLI reports for it.
"""

from typing import Any, Dict, List, Optional, Sequence


class ScatterwiseError(Exception):
    """Base class for all scatterwise failures."""

    exit_code = 1

    def to_dict(self) -> Dict[str, Any]:
        return {
            'success': False,
            'error': str(self),
            'error_type': type(self).__name__,
            'exit_code': self.exit_code,
        }


class InvalidArgumentError(ScatterwiseError, ValueError):
    exit_code = 2


class ConfigError(ScatterwiseError):
    """Scene configuration could not be parsed or validated."""

    exit_code = 2

    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        self.field = field
        self.line = line
        location = []
        if line is not None:
            location.append(f"line {line}")
        if field:
            location.append(f"field '{field}'")
        prefix = f"[{', '.join(location)}] " if location else ''
        super().__init__(f"{prefix}{message}")


class ConfigurationError(ScatterwiseError):
    """A scene is well-formed but physically invalid."""

    exit_code = 2


class TopologyError(ScatterwiseError):
    exit_code = 2


class SingularEvaluationError(ScatterwiseError):
    """A kernel was evaluated at coincident points."""


class QuadratureError(ScatterwiseError):
    def __init__(self, message: str, panels: Sequence[int] = ()):
        self.panels = tuple(int(p) for p in panels)
        suffix = f" (panels {self.panels})" if self.panels else ''
        super().__init__(f"{message}{suffix}")


class NonConvergenceError(ScatterwiseError):
    exit_code = 3

    def __init__(self, message: str, history: Optional[List[float]] = None,
                 ratio: Optional[float] = None):
        self.history = list(history or [])
        self.ratio = ratio
        super().__init__(message)


class SingularSystemError(ScatterwiseError):
    exit_code = 3

    def __init__(self, message: str, condition: Optional[float] = None):
        self.condition = condition
        super().__init__(message)


class RegimeViolationError(ScatterwiseError):
    exit_code = 4


class OutOfRegionError(ScatterwiseError):
    def __init__(self, message: str, particle: Optional[int] = None):
        self.particle = particle
        super().__init__(message)
