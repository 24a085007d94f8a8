"""Exception types shared across the toolkit.

Every error carries a stable ``name`` (the class name) so the CLI can emit
machine-readable failures without a lookup table.
"""


class FormSSLError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1

    @property
    def name(self) -> str:
        return type(self).__name__


# ingest
class MissingFile(FormSSLError):
    pass


class DuplicateId(FormSSLError):
    def __init__(self, video_id, lines=()):
        self.video_id = video_id
        self.lines = tuple(lines)
        where = f" (lines {', '.join(map(str, self.lines))})" if self.lines else ""
        super().__init__(f"duplicate video_id {video_id!r}{where}")


class SchemaViolation(FormSSLError):
    def __init__(self, line, field, reason="missing or invalid"):
        self.line = line
        self.field = field
        super().__init__(f"line {line}: field {field!r} {reason}")


class BadFractions(FormSSLError):
    pass


class TooFewSamples(FormSSLError):
    pass


class IndexOutOfRange(FormSSLError):
    pass


class DecodeFailure(FormSSLError):
    pass


# trajectory
class GapTooLong(FormSSLError):
    def __init__(self, first_bad_frame, length):
        self.first_bad_frame = first_bad_frame
        self.length = length
        super().__init__(f"detection gap of {length} frames starting at frame {first_bad_frame}")


class TooFewDetections(FormSSLError):
    pass


class DegenerateTrajectory(FormSSLError):
    pass


# triplets
class NoCandidates(FormSSLError):
    pass


class InsufficientVideos(FormSSLError):
    pass


# pretext training
class DimensionMismatch(FormSSLError):
    pass


class NonFiniteInput(FormSSLError):
    pass


class ShapeMismatch(FormSSLError):
    pass


class EmptyManifest(FormSSLError):
    pass


class DivergedLoss(FormSSLError):
    pass


# error detection
class SingleClass(FormSSLError):
    pass


class ZeroCount(FormSSLError):
    pass


class WrongCheckpointKind(FormSSLError):
    pass


class MissingClass(FormSSLError):
    pass


class EmptyPredictions(FormSSLError):
    pass


class IdSetMismatch(FormSSLError):
    pass


class TooFewJoints(FormSSLError):
    pass


# synthetic data
class BadParams(FormSSLError):
    pass


class IoError(FormSSLError):
    pass


# cli
class UnknownCommand(FormSSLError):
    exit_code = 2


class ConfigInvalid(FormSSLError):
    exit_code = 2

    def __init__(self, path, reason):
        self.path = path
        super().__init__(f"{path}: {reason}")
