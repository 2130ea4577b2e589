"""Exception taxonomy shared across the package."""


class MlcsimError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MlcsimError):
    """Invalid configuration or incompatible parameter combination."""


class SimulationError(MlcsimError):
    """Data generation failed (e.g. retry budget exhausted)."""


class ParameterError(MlcsimError):
    """Model parameters violate their invariants."""


class DegenerateFitError(MlcsimError):
    """A fit collapsed (empty class or singular normal equations)."""


class FitError(MlcsimError):
    """All restarts failed; no usable fit was produced."""


class SummaryError(MlcsimError):
    """Aggregation over an empty or inconsistent result set."""
