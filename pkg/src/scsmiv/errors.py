"""Exception hierarchy and process exit codes."""

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_ESTIMATION = 3
EXIT_IO = 4


class ScsmivError(Exception):
    """Base class for all package errors."""


class ValidationError(ScsmivError):
    """Invalid input data or configuration."""


class NegativeTime(ValidationError):
    def __init__(self, subject_id):
        super().__init__(f"subject {subject_id!r}: negative observation time")
        self.subject_id = subject_id


class NonBinaryTreatment(ValidationError):
    def __init__(self, subject_id):
        super().__init__(f"subject {subject_id!r}: treatment values must be 0 or 1")
        self.subject_id = subject_id


class UnsortedChanges(ValidationError):
    def __init__(self, subject_id):
        super().__init__(
            f"subject {subject_id!r}: treatment change times must be strictly increasing"
        )
        self.subject_id = subject_id


class ConsecutiveEqualValues(ValidationError):
    def __init__(self, subject_id):
        super().__init__(
            f"subject {subject_id!r}: consecutive treatment values must differ"
        )
        self.subject_id = subject_id


class DuplicateId(ValidationError):
    def __init__(self, subject_id):
        super().__init__(f"duplicate subject id {subject_id!r}")
        self.subject_id = subject_id


class NoEvents(ValidationError):
    def __init__(self):
        super().__init__("no subject has an observed event (status == 1)")


class DegenerateInstrument(ValidationError):
    def __init__(self, msg="instrument has no variation; nothing is identified"):
        super().__init__(msg)


class NonConvergence(ScsmivError):
    """Iterative fit failed to converge."""


class EstimationError(ScsmivError):
    """Estimation failed on otherwise valid data."""


class SingularDenominator(EstimationError):
    """The instrument-weighted at-risk denominator vanished at an event time.

    Signals weak-instrument non-identification at that time point.
    """

    def __init__(self, time, value):
        super().__init__(
            f"singular estimating-equation denominator at t={time:g} "
            f"(normalized value {value:.3e})"
        )
        self.time = time
        self.value = value


class ZeroWeight(EstimationError):
    def __init__(self):
        super().__init__("weight function vanishes at every event time")


class SingularSystem(EstimationError):
    """Triangular influence system unsolvable (should be unreachable)."""


class DataFileError(ValidationError):
    """Problems with the content of an input file."""


class MissingColumn(DataFileError):
    def __init__(self, path, column):
        super().__init__(f"{path}: missing required column {column!r}")
        self.path = path
        self.column = column


class UnknownSubjectInTreatmentFile(DataFileError):
    def __init__(self, path, line, subject_id):
        super().__init__(
            f"{path}:{line}: treatment row for unknown subject id {subject_id!r}"
        )
        self.path = path
        self.line = line
        self.subject_id = subject_id


class ParseError(DataFileError):
    def __init__(self, path, line, msg):
        super().__init__(f"{path}:{line}: {msg}")
        self.path = path
        self.line = line
