# services/errors.py: exception hierarchy shared by every pipeline stage.
# PipelineError subclasses map to exit code 1, UsageError subclasses to exit code 2.


class PipelineError(Exception):
    """A stage ran but could not produce valid output."""

    exit_code = 1


class UsageError(Exception):
    """The run was mis-specified (bad config, missing inputs)."""

    exit_code = 2


class ConfigError(UsageError):
    pass


class MissingInputError(UsageError):
    pass


class IngestError(PipelineError):
    pass


class StayDetectionError(PipelineError):
    pass


class InferenceError(PipelineError):
    pass


class ValidationError(PipelineError):
    pass


class TopicModelError(PipelineError):
    pass


class SynthError(PipelineError):
    pass


class CoordinateError(ValueError):
    """Longitude/latitude outside WGS84 ranges."""
