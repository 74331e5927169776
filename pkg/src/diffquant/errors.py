"""Exception hierarchy.

Config-level problems derive from :class:`ConfigError`; everything raised by
a solve or a simulation derives from :class:`NumericalError`.  The CLI maps
the two families to exit codes 1 and 2.
"""

from __future__ import annotations


class DiffQuantError(Exception):
    """Base class for all package errors."""


class ConfigError(DiffQuantError):
    """Invalid model, policy, or experiment configuration."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class ExprSyntaxError(ConfigError):
    """Malformed expression source."""

    def __init__(self, message: str, position: int, source: str = ""):
        super().__init__(f"{message} at position {position}")
        self.position = position
        self.source = source


class UnknownVariable(ConfigError):
    def __init__(self, name: str, allowed=()):
        allowed_s = ", ".join(allowed) if allowed else "none"
        super().__init__(f"unknown identifier {name!r} (allowed: {allowed_s})")
        self.name = name


class ScheduleTooCoarse(ConfigError):
    pass


class OutOfBox(DiffQuantError, ValueError):
    def __init__(self, point):
        super().__init__(f"point {list(point)!r} lies outside the action box")
        self.point = point


class NumericalError(DiffQuantError):
    """Failure during evaluation, simulation, or a linear solve."""


class DomainError(NumericalError):
    """Expression evaluated outside its domain (log of nonpositive, 1/0, ...)."""


class NondegeneracyViolation(NumericalError):
    def __init__(self, x):
        super().__init__(f"diffusion matrix is not positive definite at x={list(x)!r}")
        self.x = x


class MonotonicityViolation(NumericalError):
    def __init__(self, node: int, x=None):
        where = f" (x={list(x)!r})" if x is not None else ""
        super().__init__(f"stencil is not monotone at node {node}{where}: "
                         "diffusion too anisotropic for the grid spacing")
        self.node = node


class NumericalBlowup(NumericalError):
    pass


class MaxTimeExceeded(NumericalError):
    pass


class SolverDivergence(NumericalError):
    pass


class NoConvergence(NumericalError):
    pass


class NoPositiveRoot(NumericalError):
    pass
