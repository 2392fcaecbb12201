"""Exception taxonomy shared by all modules."""


class ChaosbenchError(Exception):
    """Base class for all package errors."""


class InvalidInput(ChaosbenchError):
    """Input violates a documented precondition."""


class AliasError(ChaosbenchError):
    """Evaluation grid too coarse for the requested mode content."""


class UnsupportedDimension(ChaosbenchError):
    """Operation is only defined in a specific dimension (usually d=1)."""


class DegeneratePhase(ChaosbenchError):
    """First Fourier mode too small to define a phase.

    align_to_family does not raise this; it falls back to a 64-offset grid
    search instead, since the aligned distance is still well defined.
    """


class NonPositiveDensity(ChaosbenchError):
    """A density-kind field is not positive where positivity is required."""


class TruncationError(ChaosbenchError):
    """Mode cutoff too small to represent the requested object."""


class PositivityBreach(Warning):
    """Density dipped below -tol_pos during a PDE run (run continues)."""


class ConfigError(ChaosbenchError):
    """Run configuration failed strict validation."""
