"""Exception taxonomy shared by the toolkit.

The CLI maps these onto exit codes: ConfigError -> 2, NumericalError -> 3,
FormatError and OSError -> 4.
"""


class FewspectError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(FewspectError):
    """Invalid configuration, dimension mismatch, or degenerate geometry."""


class NumericalError(FewspectError):
    """Non-finite values, divergence, or an unusable operator (e.g. zero sensitivity)."""


class FormatError(FewspectError):
    """Malformed or inconsistent on-disk data."""
