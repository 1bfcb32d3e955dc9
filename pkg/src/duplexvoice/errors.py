"""Exception types raised across the pipeline."""


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class InvalidConfigError(PipelineError):
    """A model or module configuration is internally inconsistent."""


class DimMismatchError(PipelineError):
    """Tensor shapes do not line up with the parameters or caches."""


class InvalidKError(PipelineError):
    """top-k parameter outside [1, vocab]."""


class BandMismatchError(PipelineError):
    """Feature chunk does not carry the expected number of mel bands."""


class InfiniteChunkError(PipelineError):
    """Operation requires a finite encoder chunk size."""


class EmptyCacheError(PipelineError):
    """Generation requested on a cache that holds no prefilled turn."""


class FrozenViolatedError(PipelineError):
    """A parameter fingerprint changed when it was required to stay fixed."""


class InvalidTokenIdError(PipelineError):
    """Speech token id outside the codec codebook."""


class PushAfterCloseError(PipelineError):
    """Token pushed into a FIFO that was already closed."""


class SessionCorruptError(PipelineError):
    """Per-session caches are in an inconsistent state."""


class IncompleteTurnError(PipelineError):
    """Latency measurement requested on events that do not span a full turn."""


class UnknownSessionError(PipelineError):
    """Wire message referenced a session id that was never registered."""


class OverloadError(PipelineError):
    """Per-session job queue exceeded its bound."""


class ScenarioError(PipelineError):
    """Scenario file failed to parse or violates ordering constraints."""
