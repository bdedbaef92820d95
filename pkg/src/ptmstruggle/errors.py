"""Exception hierarchy shared by the pipeline stages."""


class PTMError(Exception):
    """Base class; ``code`` is the machine-readable tag printed by the CLI."""

    code = "INTERNAL_ERROR"


class InputError(PTMError):
    code = "INPUT_ERROR"


class MissingFile(InputError):
    code = "DATASET_NOT_FOUND"


class SchemaError(InputError):
    code = "SCHEMA_ERROR"

    def __init__(self, row, column, reason):
        self.row = row
        self.column = column
        self.reason = reason
        super().__init__(f"row {row}, column {column!r}: {reason}")


class DuplicateAttempt(InputError):
    code = "DUPLICATE_ATTEMPT"

    def __init__(self, student, task, attempt):
        self.student = student
        self.task = task
        self.attempt = attempt
        super().__init__(f"duplicate attempt {attempt} for student {student!r}, task {task!r}")


class UnknownStudent(InputError):
    code = "UNKNOWN_STUDENT"


class InvalidConfig(InputError):
    code = "CONFIG_INVALID"


class EmptyInput(PTMError):
    code = "EMPTY_INPUT"


class MixedPair(PTMError):
    code = "MIXED_PAIR"


class NoSuccessfulPeers(PTMError):
    code = "NO_SUCCESSFUL_PEERS"


class EmptyHistory(PTMError):
    code = "EMPTY_HISTORY"


class EmptySequence(PTMError):
    code = "EMPTY_SEQUENCE"


class BackendUnavailable(PTMError):
    code = "BACKEND_UNAVAILABLE"


class CacheCorrupt(PTMError):
    code = "CACHE_CORRUPT"


class DivergenceDetected(PTMError):
    code = "TRAINING_DIVERGED"


class UnknownTaskId(PTMError):
    code = "UNKNOWN_TASK_ID"


class TooFewStudents(PTMError):
    code = "TOO_FEW_STUDENTS"


class InsufficientHistory(PTMError):
    code = "INSUFFICIENT_HISTORY"


class SingleClass(PTMError):
    code = "SINGLE_CLASS"


class KeyMismatch(PTMError):
    code = "KEY_MISMATCH"


class MissingInput(InputError):
    code = "MISSING_INPUT"
