"""Exception hierarchy shared across the toolkit.

The CLI maps each family onto a stable exit code, so new errors should
subclass one of these rather than raising bare builtins.
"""


class SegQualError(Exception):
    """Base class for all toolkit errors."""


class InvalidInputError(SegQualError, ValueError):
    """An argument violates an operation's precondition."""


class UndefinedMetricError(SegQualError, ValueError):
    """A metric has no value for the given input (empty mask, constant sequence)."""


class DatasetError(SegQualError):
    """A dataset directory or one of its files is malformed."""


class TrainingDivergedError(SegQualError, FloatingPointError):
    """Loss or gradient became non-finite during training."""


class ModelFormatError(SegQualError):
    """A saved model file cannot be decoded."""


class ModelVersionError(ModelFormatError):
    pass


class ModelChecksumError(ModelFormatError):
    pass


class ArtifactMismatchError(SegQualError):
    """A model and a dataset (or flags) disagree about the input contract."""


class AmbiguityError(SegQualError):
    """An evaluator oracle could not separate two probe maps."""
