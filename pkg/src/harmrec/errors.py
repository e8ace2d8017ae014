"""Semantic exception hierarchy.

Public functions raise these instead of bare ValueError/RuntimeError so
callers (and the CLI) can distinguish configuration mistakes from genuine
numerical degeneracies.
"""


class HarmrecError(Exception):
    """Base error for this package."""


class ConfigurationError(HarmrecError, ValueError):
    """Inputs violate a contract: bad shapes, indices, parameter ranges."""


class ScoreOverflowError(HarmrecError, FloatingPointError):
    """An exponent |v . u| exceeded the guard; profiles need rescaling.

    Raised instead of silently returning inf, which would corrupt every
    probability and gradient downstream.
    """


class UndefinedRatioError(HarmrecError, ZeroDivisionError):
    """Acceptance ratio s_E / (s_E + c) evaluated with s_E = c = 0."""


class DegenerateDynamicsError(HarmrecError, ZeroDivisionError):
    """Profile-update denominator is zero (no attraction and no anchor)."""


class IFTSolveError(HarmrecError, RuntimeError):
    """The implicit-function linear system is (near-)singular."""

    def __init__(self, message, condition_estimate=None):
        super().__init__(message)
        self.condition_estimate = condition_estimate


class RescaleInfeasibleError(HarmrecError, RuntimeError):
    """No score-preserving rescaling can satisfy the contraction bound."""


class CalibrationError(HarmrecError, RuntimeError):
    """No candidate value of c satisfies the calibration rule."""


class OptimizationError(HarmrecError, RuntimeError):
    """Every optimizer start failed; carries per-start diagnostics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []
