"""Exception hierarchy. Each family carries the CLI exit code it maps to."""


class GraspvocError(Exception):
    exit_code = 1


class ProviderError(GraspvocError):
    exit_code = 2


class ProviderUnavailable(ProviderError):
    pass


class ValidationError(GraspvocError):
    exit_code = 3


class ValidationFailed(ValidationError):
    """Provider answered, but no answer survived validation."""

    def __init__(self, message, last_error=None):
        super().__init__(message)
        self.last_error = last_error


class MalformedResponse(ValidationError):
    pass


class UnknownLabel(ValidationError):
    pass


class DegenerateCloud(ValidationError):
    pass


class EmptyCloud(ValidationError):
    pass


class EmptyAssignment(ValidationError):
    pass


class InvalidVocabulary(ValidationError):
    pass


class SegmentationEmpty(ValidationError):
    pass


class SchemaMismatch(ValidationError):
    pass


class OutOfRange(ValidationError):
    pass


class EmptyList(ValidationError):
    pass


class NoContacts(ValidationError):
    pass


class NoControls(ValidationError):
    pass


class NoGraspResponses(ValidationError):
    pass


class NoCompatibleGrasp(GraspvocError):
    exit_code = 4
