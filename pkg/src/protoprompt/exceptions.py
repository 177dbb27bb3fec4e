"""Error hierarchy for protoprompt.

Every error raised on purpose by the library derives from
:class:`ProtopromptError`, so the CLI can turn it into a one-line diagnostic.

Examples:
    >>> err = SamplingError("not enough instances", classes=[3, 7])
    >>> err.classes
    [3, 7]
    >>> isinstance(err, ProtopromptError)
    True
"""

from typing import Optional, Sequence


class ProtopromptError(Exception):
    """Base class for all protoprompt errors."""


class ManifestParseError(ProtopromptError, ValueError):
    """A manifest or split file could not be parsed.

    Examples:
        >>> str(ManifestParseError("missing 'bbox'", record="annotations[4]"))
        "annotations[4]: missing 'bbox'"
    """

    def __init__(self, message: str, record: Optional[str] = None):
        self.record = record
        super().__init__(f"{record}: {message}" if record else message)


class DatasetValidationError(ProtopromptError, ValueError):
    """A dataset violates one of its invariants (dangling ids, bad boxes)."""


class SamplingError(ProtopromptError):
    """Episode or fine-tuning set sampling could not satisfy the request."""

    def __init__(self, message: str, classes: Sequence[int] = ()):
        self.classes = list(classes)
        if self.classes:
            message = f"{message} (classes: {', '.join(str(c) for c in self.classes)})"
        super().__init__(message)


class ShapeMismatchError(ProtopromptError, ValueError):
    """An array or tensor argument has the wrong shape or length."""


class ConfigError(ProtopromptError, ValueError):
    """A run config, override or grid spec is invalid."""


class CheckpointIntegrityError(ProtopromptError):
    """A checkpoint's stored digests do not match its contents."""


class NonFiniteLossError(ProtopromptError, FloatingPointError):
    """A loss component became NaN or infinite.

    Examples:
        >>> str(NonFiniteLossError("kd", iteration=12))
        'non-finite kd loss at iteration 12'
    """

    def __init__(self, component: str, iteration: Optional[int] = None):
        self.component = component
        self.iteration = iteration
        where = f" at iteration {iteration}" if iteration is not None else ""
        super().__init__(f"non-finite {component} loss{where}")
