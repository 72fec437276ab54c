"""Exception types shared across the package.

Every error carries a stable ``category`` string so the CLI can emit a
one-line machine-parsable failure before exiting nonzero.
"""


class GateSearchError(Exception):
    category = "error"


class ConfigError(GateSearchError):
    """Invalid configuration value, key, or incompatible module options."""

    category = "config-error"


class DimensionError(GateSearchError):
    """Tensor shape mismatch in an operation."""

    category = "dimension-error"


class FormatError(GateSearchError):
    """Malformed file content (config, IDX, profile, checkpoint, architecture)."""

    category = "format-error"


class FitError(GateSearchError):
    """Latency profile cannot be fitted (too few or degenerate samples)."""

    category = "fit-error"


class CoverageError(GateSearchError):
    """A latency profile does not cover a required layer condition."""

    category = "coverage-error"


class DeadLayerError(GateSearchError):
    """Every output channel of a layer is gated off."""

    category = "dead-layer"


class WiringError(GateSearchError):
    """Inconsistent skip/channel wiring in a compiled architecture."""

    category = "wiring-error"


class StateError(GateSearchError):
    """Operation invoked in an invalid state (e.g. backward called twice)."""

    category = "state-error"


class DivergenceError(GateSearchError):
    """Training produced a non-finite loss."""

    category = "divergence"
