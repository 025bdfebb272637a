"""Exception hierarchy shared across the package.

Each class maps to one CLI exit code (see cli.EXIT_CODES).
"""


class JointDiffError(Exception):
    """Base class for all package errors."""


class ConfigError(JointDiffError):
    """Invalid configuration value or unknown config key."""


class DimensionError(JointDiffError):
    """Array shapes do not match an operation's contract."""


class ScheduleError(JointDiffError):
    """Non-monotone or otherwise illegal timestep sequence."""


class AdapterError(JointDiffError):
    """Adapter shapes do not fit the host model, or bad attach/detach."""


class AlignmentError(JointDiffError):
    """Aligned branches disagree on token count."""


class CombinationError(JointDiffError):
    """Multi-model combination with mismatched architectures."""


class InputError(JointDiffError):
    """A pinned or held branch is missing its clean input."""


class CheckpointError(JointDiffError):
    """Malformed checkpoint file or shape-incompatible tensors."""


class NumericalFailure(JointDiffError):
    """NaN/Inf encountered in a loss or guidance gradient."""
