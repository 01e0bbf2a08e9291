"""Exception hierarchy shared across the package.

``exit_code`` follows the CLI convention: 1 usage, 2 data, 3 backend/transport.
"""


class StorecostError(Exception):
    exit_code = 2


class UsageError(StorecostError):
    exit_code = 1


class VocabularyError(StorecostError):
    """A token is not part of the backend vocabulary."""


class ShapeError(StorecostError):
    """Query/token geometry does not match what the backend expects."""


class UndefinedConditionalError(StorecostError):
    """Conditioning event has probability zero."""


class ParameterError(StorecostError):
    """Invalid model or operation parameter."""


class InfiniteDivergenceError(StorecostError):
    """KL(p || q) with q(x) = 0 where p(x) > 0; signals a broken backend."""


class DataFormatError(StorecostError):
    """Malformed input file (bad line, bad column, bad value)."""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class AlignmentError(StorecostError):
    """Token forms cannot be aligned with the raw sentence text."""


class IngestionError(StorecostError):
    """Reading-data schema mismatch; names the missing column."""


class DegeneratePredictorError(StorecostError):
    """Zero-variance column passed to the z-scorer."""


class SingularDesignError(StorecostError):
    """Rank-deficient regression design matrix."""


class FoldError(StorecostError):
    """A cross-validation fold could not be fit."""

    def __init__(self, message, fold=None):
        if fold is not None:
            message = f"fold {fold}: {message}"
        super().__init__(message)
        self.fold = fold


class CorrelationError(StorecostError):
    """Correlation undefined (zero variance or too few pairs)."""


class LexiconError(StorecostError):
    """Stimulus lexicon is missing a slot fill."""


class BackendError(StorecostError):
    exit_code = 3


class TransportError(BackendError):
    """Timeout, broken connection, or dead server process."""


class ProtocolError(BackendError):
    """Malformed or mismatched wire message."""


class ContextLengthError(BackendError):
    """Sentence exceeds the model server's context limit."""


class StorageComputationError(BackendError):
    """A sentence-level storage run aborted; carries the partial result."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial
