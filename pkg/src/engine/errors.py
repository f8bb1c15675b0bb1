from typing import Any, Dict, Optional


class TsldError(Exception):
    """Base class for every error raised by the engine"""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})

    def __getattr__(self, name: str) -> Any:
        # Diagnostic values are exposed as attributes (err.residual, err.attempts, ...)
        diagnostics = self.__dict__.get('diagnostics', {})
        if name in diagnostics:
            return diagnostics[name]
        raise AttributeError(name)


class NonConvergence(TsldError):
    """An iterative solver exhausted its iteration budget"""


class SingularInnerMatrix(TsldError):
    """R + B^T P B is numerically singular"""


class InvalidModel(TsldError, ValueError):
    """Model parameters violate a structural invariant"""


class DimensionMismatch(TsldError, ValueError):
    """Vector or matrix shapes disagree"""


class InvalidLambda(TsldError, ValueError):
    """Prior stiffness below one"""


class ReservoirEmpty(TsldError):
    """An asymmetric noise model was used before calibration"""


class CalibrationFailure(TsldError):
    """Offline ULA calibration failed its drift diagnostic"""


class NumericalBlowup(TsldError):
    """A Langevin iterate left the finite range"""


class RejectionExhausted(TsldError):
    """No admissible sample after the configured number of attempts"""


class StateBlowup(TsldError):
    """The controlled state exceeded the blowup threshold"""
