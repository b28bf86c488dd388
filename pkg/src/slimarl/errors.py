"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2,
StageDependencyError -> 3, DivergenceError -> 4.
"""


class ShapeError(ValueError):
    """An array argument has the wrong shape; message carries the diagnostic."""


class StaleCacheError(RuntimeError):
    """A backward pass was handed a cache from before the last optimizer step."""


class NonFiniteGradError(FloatingPointError):
    """Gradients contain NaN/inf; the optimizer step was aborted."""


class DivergenceError(RuntimeError):
    """A training run produced non-finite losses or a collapsed policy."""


class MaskError(ValueError):
    """A mask references a feature block the environment does not expose."""


class ConfigError(ValueError):
    """The experiment configuration is malformed or inconsistent."""


class StageDependencyError(RuntimeError):
    """A pipeline stage was requested but an artifact it depends on is missing."""


class CheckpointError(RuntimeError):
    """Base class for checkpoint file problems."""


class CheckpointCorruptError(CheckpointError):
    """Checkpoint file is truncated or not a checkpoint at all."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an unsupported format version."""


class CheckpointHashError(CheckpointError):
    """Checkpoint content does not match its embedded integrity hash."""


class BufferError_(RuntimeError):
    """Base class for expert-buffer file problems."""


class BufferCorruptError(BufferError_):
    """Buffer file is truncated or not a buffer at all."""


class BufferVersionError(BufferError_):
    """Buffer was written by an unsupported format version."""


class BufferHashError(BufferError_):
    """Buffer content does not match its embedded integrity hash."""
