#!/usr/bin/env python3
"""
Exception hierarchy for psifrac.
Validation problems derive from ValueError, numerical failures from RuntimeError.
"""

from typing import Optional


class PsiFracError(Exception):
    """Base class for every psifrac error."""


class ValidationError(PsiFracError, ValueError):
    """Input rejected before any numerics run."""


class DomainError(ValidationError):
    """Argument outside the domain of an operation."""


class PoleError(DomainError):
    """Function evaluated at a pole (e.g. Gamma at a non-positive integer)."""


class GridError(ValidationError):
    """Quadrature grid does not fit the requested interval."""


class MissingDerivativeError(ValidationError):
    """A required derivative (of a path or a Lagrangian) is unavailable."""


class ProblemFileError(ValidationError):
    """Malformed or inconsistent problem file."""


class ExpressionError(ValidationError):
    """Base class for expression language errors."""


class ParseError(ExpressionError):
    """Syntax error with source position."""

    def __init__(self, message: str, line: int = 1, column: int = 1,
                 source: Optional[str] = None):
        self.line = line
        self.column = column
        self.source = source
        super().__init__(f"{message} (line {line}, column {column})")


class UnboundVariableError(ExpressionError):
    """Expression references a variable that has no value."""


class EvaluationError(ExpressionError):
    """Expression evaluated outside its mathematical domain."""


class DifferentiationError(ExpressionError):
    """Expression cannot be differentiated symbolically."""


class NumericalError(PsiFracError, RuntimeError):
    """A numerical procedure failed to deliver a result."""


class ConvergenceError(NumericalError):
    """Iteration cap reached before the tolerance."""


class NoSignChangeError(NumericalError):
    """Root bracket does not enclose a sign change."""


class SingularityError(NumericalError):
    """Evaluation too close to a kernel singularity."""
