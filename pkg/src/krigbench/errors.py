"""Exception types shared across the package."""


class KrigbenchError(Exception):
    """Base class for all errors raised by this package."""

    kind = "error"


class ConfigError(KrigbenchError):
    """Invalid parameter value or unusable configuration."""

    kind = "config"


class ShapeError(KrigbenchError):
    """Array dimensions disagree with the declared layout."""

    kind = "shape"


class ParseError(KrigbenchError):
    """Malformed input file; carries the offending line number."""

    kind = "parse"

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DegenerateScaleError(KrigbenchError):
    """Normalization scale collapsed (zero capacity or zero variance)."""

    kind = "degenerate-scale"


class NumericalError(KrigbenchError):
    """Linear-algebra failure that survived jitter escalation."""

    kind = "numerical"

    def __init__(self, message: str, condition_estimate: float | None = None):
        self.condition_estimate = condition_estimate
        if condition_estimate is not None:
            message = f"{message} (condition estimate {condition_estimate:.3e})"
        super().__init__(message)


class UnsupportedPhaseError(KrigbenchError):
    """The split scheme does not define the requested phase."""

    kind = "unsupported-phase"


class ContractViolationError(KrigbenchError):
    """An API was driven outside its documented protocol (e.g. stale cache)."""

    kind = "contract-violation"


class TrainingAbortError(KrigbenchError):
    """Training cannot continue; names the offending parameter."""

    kind = "training-abort"


class DegenerateBatchError(KrigbenchError):
    """A sampled batch left no unmasked source nodes."""

    kind = "degenerate-batch"


class UndefinedRatioError(KrigbenchError):
    """Generalization ratio requested with zero validation MAE."""

    kind = "undefined-ratio"


class CheckpointNotFoundError(KrigbenchError):
    """Evaluation requested against a checkpoint that does not exist."""

    kind = "checkpoint-not-found"
