"""Exception hierarchy shared across the pipeline."""


class MoocGradeError(Exception):
    """Base class for all package errors."""


class DataError(MoocGradeError):
    """Input data failed validation. Maps to CLI exit code 2."""


class LogParseError(DataError):
    """A log line is not well-formed JSON or has mistyped fields."""

    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class SchemaError(LogParseError):
    """A log line is valid JSON but violates the event schema."""


class CatalogError(DataError):
    pass


class IngestionError(DataError):
    """Too many lines were dropped while ingesting a log."""


class ExtractionError(DataError):
    pass


class ProtocolError(DataError):
    pass


class ColdStartError(DataError):
    """Prediction requested for students the model never saw."""

    def __init__(self, students):
        self.students = list(students)
        shown = ", ".join(map(str, self.students[:5]))
        more = "" if len(self.students) <= 5 else f" (+{len(self.students) - 5} more)"
        super().__init__(f"unknown students: {shown}{more}")


class ModelFormatError(DataError):
    """A serialized model document is corrupt or from another version."""


class ImportanceError(DataError):
    pass


class DivergenceError(MoocGradeError):
    """Training produced a non-finite objective. Maps to CLI exit code 3."""

    def __init__(self, epoch, value):
        self.epoch = epoch
        self.value = value
        super().__init__(f"objective became non-finite ({value}) at epoch {epoch}; "
                         "lower the learning rate")
