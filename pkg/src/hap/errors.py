"""Exception types shared across the pipeline."""


class HapError(Exception):
    """Base class for all library errors."""


class InvalidArgument(HapError, ValueError):
    pass


class BehindCamera(HapError, ValueError):
    """A point projected through a pinhole camera has non-positive depth."""


class DegenerateVisibility(HapError, RuntimeError):
    """The visible partition of the body surface is empty."""


class Divergence(HapError, RuntimeError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class ExternalToolError(HapError, RuntimeError):
    def __init__(self, message, stderr=""):
        super().__init__(message)
        self.stderr = stderr


class StageFailure(HapError, RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
