"""Exception taxonomy shared across the package."""


class PipelineError(Exception):
    """Base class for every error raised by eegscribe."""


class DimensionError(PipelineError, ValueError):
    """Array shapes or extents do not agree."""


class ParameterError(PipelineError, ValueError):
    """An argument value is outside its documented domain."""


class ContractError(PipelineError, RuntimeError):
    """A documented precondition of an operation was violated."""


class LabelError(PipelineError, ValueError):
    """A class index lies outside the valid label range."""


class DecompositionError(PipelineError, RuntimeError):
    """A matrix factorization failed (e.g. rank-deficient covariance)."""


class FormatError(PipelineError, ValueError):
    """A serialized file does not match its container format."""


class LeakageError(PipelineError, RuntimeError):
    """Cross-validation folds share trials; results would be invalid."""


class TrainingError(PipelineError, RuntimeError):
    """Optimization diverged. Carries the last finite state observed."""

    def __init__(self, message, last_step=None, history=None):
        super().__init__(message)
        self.last_step = last_step
        self.history = history


class StageError(PipelineError, RuntimeError):
    """A CLI pipeline stage failed. Carries the stage name for diagnostics."""

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
