"""Exception types shared across the package."""


class AdvseError(Exception):
    """Base class for all package-specific errors."""


class FormatError(AdvseError):
    """Malformed or unreadable file contents."""


class UnsupportedFormatError(AdvseError):
    """File or buffer is readable but uses an encoding we do not handle."""


class DegenerateInputError(AdvseError):
    """Input is structurally valid but degenerate in content (e.g. silent audio)."""


class SizeError(AdvseError):
    """Input shorter than the operation requires."""


class ShapeError(AdvseError):
    """Array or spectrogram dimensions are inconsistent."""


class BindingError(AdvseError):
    """A graph leaf was left unbound at evaluation time."""


class ContractError(AdvseError):
    """An operation was invoked outside its contract (e.g. non-scalar loss root)."""


class NumericError(AdvseError):
    """Non-finite values appeared where finite ones are required."""


class TrainingError(AdvseError):
    """Training diverged or was configured inconsistently."""


class UndefinedMetricError(AdvseError):
    """Metric has no defined value for these inputs (e.g. zero perturbation)."""


class IllConditionedMetricError(AdvseError):
    """Metric denominator is too close to a singularity to be meaningful."""


class EmptyInputError(AdvseError):
    """An input that must be non-empty was empty."""
