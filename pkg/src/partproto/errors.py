"""Error types shared across modules. Module-local errors (ShapeError,
GenerationError, FormatError) live next to the code that raises them."""


class DataError(RuntimeError):
    """A dataset lacks something an operation requires (a class, a mask)."""


class ConfigError(RuntimeError):
    """A configuration value is structurally invalid for the requested op."""


class TrainingError(RuntimeError):
    """Training diverged or was asked to do something unsupported."""


class BaselineInapplicable(RuntimeError):
    """A baseline method's preconditions do not hold for this model."""


class ExplainError(RuntimeError):
    """An explanation artifact could not be produced."""


class DebugError(RuntimeError):
    """A debugging session received inconsistent state or feedback."""


class AnnotatorTimeout(RuntimeError):
    """The annotator did not answer; the current round is aborted."""
