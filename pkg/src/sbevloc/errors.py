"""Exception hierarchy.

Every error the library raises derives from :class:`SbevlocError`, split into
data errors (bad inputs, too little data) and numerical aborts. The CLI maps
the two families onto distinct exit codes.
"""


class SbevlocError(Exception):
    """Base class for all library errors."""


class DataError(SbevlocError):
    """Input data is malformed or insufficient."""


class NumericalError(SbevlocError):
    """A computation produced a non-finite or degenerate value."""


class TruncatedFile(DataError):
    pass


class NonFinite(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ImageTooSmall(DataError):
    pass


class NoValidQuery(DataError):
    """No candidate admits both a positive and the required negatives."""


class ShapeMismatch(DataError):
    pass


class MissingCache(SbevlocError):
    """Backward pass requested without a cached forward pass."""


class DegenerateDescriptor(NumericalError):
    """A vector that must be normalized has (near) zero norm."""


class EmptyNegatives(DataError):
    pass


class NoScans(DataError):
    pass


class NumericalAbort(NumericalError):
    """Training produced a non-finite loss."""


class EmptyTrajectory(DataError):
    pass


class EmptyDatabase(DataError):
    pass


class OutOfBounds(DataError):
    pass


class TooFewCorrespondences(DataError):
    pass


class NoConsensus(DataError):
    """RANSAC did not reach the minimum inlier count."""


class EmptyResults(DataError):
    pass


class NoPositives(DataError):
    """No query has a true match available, so recall is undefined."""


class SequenceTooShort(DataError):
    pass


class CheckpointError(DataError):
    pass


class ConfigError(DataError):
    pass
