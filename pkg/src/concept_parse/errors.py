"""Exception types shared across the toolkit."""


class ConceptParseError(Exception):
    """Base class for all toolkit errors."""


# parse core


class EmptyUtteranceError(ConceptParseError):
    """Raised when an utterance has no non-whitespace content."""


class MalformedAnnotationError(ConceptParseError):
    """Raised when a seqlogical annotation cannot be parsed against its utterance."""


class PointerRangeError(ConceptParseError):
    """Raised when a pointer index falls outside the source sequence."""


class MalformedTargetError(ConceptParseError):
    """Raised when a target sequence violates bracket discipline.

    Carries the first offending token position in ``position``.
    """

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (position {position})")
        self.position = position


class UnknownTagFormatError(ConceptParseError):
    """Raised when a tag token string does not match any known shape."""


# data io


class DataError(ConceptParseError):
    """Raised when an input file is missing or unreadable."""


class DomainNotFoundError(ConceptParseError):
    """Raised when a requested domain does not exist in the corpus."""


class SpanAlignmentError(ConceptParseError):
    """Raised when a mention span does not align to token boundaries."""


# tensors and model


class ShapeError(ConceptParseError):
    """Raised when tensor operands have incompatible shapes."""


class NotScalarError(ConceptParseError):
    """Raised when backward is started from a non-scalar tensor."""


class NonFiniteError(ConceptParseError):
    """Raised when a forward op produces NaN or Inf values."""


class LengthExceededError(ConceptParseError):
    """Raised when a sequence exceeds the configured maximum length."""


class EmptyDescriptionError(ConceptParseError):
    """Raised when a concept tag carries an empty description."""


class UnknownConceptError(ConceptParseError):
    """Raised when a concept tag is not present in the active bank."""


# training and evaluation


class SupportError(ConceptParseError):
    """Raised when a gold index lies outside the distribution support."""


class EmptyFewShotError(ConceptParseError):
    """Raised when fine-tuning is requested with no examples."""


class EmptyEvalSetError(ConceptParseError):
    """Raised when evaluation is requested on an empty record set."""


class NeedTwoDomainsError(ConceptParseError):
    """Raised when a leave-one-out run is requested on a single-domain corpus."""


class MetricMismatchError(ConceptParseError):
    """Raised when one table would mix incompatible metric kinds."""


class CheckpointMismatchError(ConceptParseError):
    """Raised when a checkpoint is used with an incompatible config or vocabulary."""
