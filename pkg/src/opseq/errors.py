"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: configuration and input problems exit
with 2, runtime/training failures with 3.
"""


class OpseqError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(OpseqError):
    """Tensor shapes do not compose."""


class ConfigError(OpseqError):
    """Invalid configuration value, unknown key, or malformed input file."""


class VocabularyError(OpseqError):
    """Token id outside the vocabulary range."""


class EmptySampleError(OpseqError):
    """A sample yielded zero opcodes."""


class InsufficientDataError(OpseqError):
    """Not enough samples to perform a split."""


class SequenceTooShortError(OpseqError):
    """Sequence shorter than a convolution kernel or pooling window."""


class TrainingDivergedError(OpseqError):
    """Loss or gradients became non-finite during training."""


class EvaluationError(OpseqError):
    """A checked function returned a non-finite value."""
