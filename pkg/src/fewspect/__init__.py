"""Few-view cardiac SPECT toolkit.

Simulates a stationary multi-pinhole acquisition, reconstructs with MLEM,
and trains/evaluates a dual-domain (projection + image) network against
multi-angle reference reconstructions.
"""

from .datamodel import (
    LabeledMasks,
    ProjectionSet,
    VolumeGrid,
    read_projections,
    read_volume,
    write_projections,
    write_volume,
)
from .errors import ConfigError, FewspectError, FormatError, NumericalError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "FewspectError",
    "FormatError",
    "LabeledMasks",
    "NumericalError",
    "ProjectionSet",
    "VolumeGrid",
    "read_projections",
    "read_volume",
    "write_projections",
    "write_volume",
    "__version__",
]
