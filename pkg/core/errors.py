class SlamError(Exception):
    """Base class for every error raised by the pipeline."""


class GeometryError(SlamError):
    pass


class LowParallaxError(GeometryError):
    pass


class NegativeDepthError(GeometryError):
    pass


class InsufficientCorrespondencesError(GeometryError):
    pass


class NoConsensusError(GeometryError):
    pass


class DegenerateConfigurationError(GeometryError):
    pass


class BackendError(SlamError):
    """A detector or matcher engine failed; the message carries its diagnostic."""


class DimensionMismatchError(SlamError):
    pass


class TrackingFailure(SlamError):
    pass


class TooFewMatchesError(TrackingFailure):
    pass


class InsufficientMatchesError(TrackingFailure):
    pass


class NoCandidateError(TrackingFailure):
    pass


class InitializationError(TrackingFailure):
    pass


class RankDeficiencyError(SlamError):
    pass


class VocabularyError(SlamError):
    pass


class EmptyCorpusError(VocabularyError):
    pass


class VocabularyFormatError(VocabularyError):
    pass


class EvaluationError(SlamError):
    pass


class EmptyOverlapError(EvaluationError):
    pass


class TooShortTrajectoryError(EvaluationError):
    pass


class ConfigError(SlamError):
    pass


class ConfigParseError(ConfigError):
    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class RangeViolationError(ConfigError):
    pass


class DatasetError(SlamError):
    pass


class MissingManifestError(DatasetError):
    pass


class UnreadableImageError(DatasetError):
    pass


class SceneError(SlamError):
    pass


class RejectionBudgetExceededError(SceneError):
    pass
