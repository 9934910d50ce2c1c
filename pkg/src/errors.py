from typing import Optional


class EngageError(Exception):
    pass


class InputError(EngageError):
    pass


class StageError(EngageError):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")


# ingest
class MalformedRecord(EngageError):
    def __init__(self, message: str, line_no: Optional[int] = None):
        self.line_no = line_no
        super().__init__(message if line_no is None else f"line {line_no}: {message}")


class MissingField(MalformedRecord):
    def __init__(self, field: str, line_no: Optional[int] = None):
        self.field = field
        super().__init__(f"missing required field '{field}'", line_no)


class UnresolvedClass(EngageError):
    def __init__(self, class_id: str):
        self.class_id = class_id
        super().__init__(f"turn references unknown class_id '{class_id}'")


# sessionizer
class RemoteDetectorUnavailable(EngageError):
    pass


class MismatchedStreamLength(EngageError):
    pass


# features
class SessionOutsideCalendar(EngageError):
    def __init__(self, session_id: str):
        self.session_id = session_id
        super().__init__(f"session '{session_id}' starts outside the semester calendar")


# cluster
class NegativeValueInLogColumn(EngageError):
    pass


class DegenerateMatrix(EngageError):
    pass


class ColumnMismatch(EngageError):
    pass


class KTooLarge(EngageError):
    pass


class RangeTooShort(EngageError):
    pass


class LengthMismatch(EngageError):
    pass


# procmine
class UnlabeledSession(EngageError):
    pass


class EmptyInput(EngageError):
    pass


class StateSetMismatch(EngageError):
    pass


# stats
class RankDeficient(EngageError):
    pass


class SingleCluster(EngageError):
    pass


# synth
class NonAbsorbing(EngageError):
    pass


# report
class MissingArtifact(EngageError):
    pass
