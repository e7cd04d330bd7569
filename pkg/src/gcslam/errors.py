"""Exception types raised across the toolkit."""


class GcslamError(Exception):
    """Base class; the CLI turns any of these into a one-line diagnostic."""


class SingularPlane(GcslamError):
    pass


class InsufficientCorrespondences(GcslamError):
    pass


class DegenerateNormals(GcslamError):
    pass


class NoGroundCandidates(GcslamError):
    pass


class DegenerateCandidates(GcslamError):
    pass


class NonConvergence(GcslamError):
    pass


class NonInvertibleCovariance(GcslamError):
    pass


class RankDeficient(GcslamError):
    pass


class UnknownScenario(GcslamError):
    pass


class OutOfSpan(GcslamError):
    pass


class NoOverlap(GcslamError):
    pass


class RegistrationFailure(GcslamError):
    def __init__(self, frame_index: int, cause: Exception):
        super().__init__(f"registration failed at frame {frame_index}: {cause}")
        self.frame_index = frame_index
        self.cause = cause


class ConfigError(GcslamError):
    pass
