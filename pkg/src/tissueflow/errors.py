"""Exception types shared across the package.

Every error raised by the public API is one of these, so callers (and the
command line driver, which maps them to exit codes) can tell configuration
mistakes from solver breakdowns from verification failures.
"""


class TissueflowError(Exception):
    """Base class for all package errors."""


class GeometryError(TissueflowError):
    """Invalid or inconsistent unit-cell / domain geometry."""


class MeshError(TissueflowError):
    """Mesh generation failed (resolution, quality, or conformity)."""


class ParameterError(TissueflowError):
    """A physical parameter is outside its admissible range."""


class DomainError(TissueflowError):
    """An input field value is outside the operation's domain (e.g. negative
    concentration passed to a kinetics rate)."""


class SolveError(TissueflowError):
    """Linear or nonlinear solve broke down, or its residual check failed."""


class StateError(TissueflowError):
    """An operation was called before its prerequisites exist (missing cell
    solutions, missing tensor artifacts, mismatched meshes)."""


class CompatibilityError(TissueflowError):
    """Neumann/flux data violate a compatibility condition (nonzero net
    boundary flux, incompatible cell-problem right-hand side)."""


class StepError(TissueflowError):
    """A time step restriction (CFL or explicit-reaction bound) was violated;
    the message advises a smaller dt."""


class SchemeError(TissueflowError):
    """The scheme produced a value that its design guarantees forbid (e.g.
    concentration below -1e-12). Indicates a bug, never silently repaired."""


class ValidationError(TissueflowError):
    """Run configuration violates a documented model assumption."""


class ConfigError(TissueflowError):
    """Run configuration text could not be parsed."""
