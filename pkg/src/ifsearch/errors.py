"""Exception types shared across the package."""


class IfsearchError(Exception):
    """Base class for every error this package raises deliberately."""


class FormatError(IfsearchError):
    """A binary artifact does not conform to its file format.

    ``offset`` is the byte offset of the offending field when known,
    ``path`` the file being read or written.
    """

    def __init__(self, message, *, path=None, offset=None):
        self.path = path
        self.offset = offset
        prefix = f"{path}: " if path is not None else ""
        suffix = f" (byte offset {offset})" if offset is not None else ""
        super().__init__(f"{prefix}{message}{suffix}")


class BadMagic(FormatError):
    pass


class UnsupportedVersion(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class NonFiniteData(FormatError):
    """Payload contains NaN or infinity."""


class SchemaError(IfsearchError):
    """A structured input violates the documented schema or its invariants."""


class InvariantError(IfsearchError, ValueError):
    """An in-memory value violates a type invariant."""


class DisjointBox(IfsearchError):
    """A pixel box lies entirely outside the feature grid's image area."""


class DimensionMismatch(IfsearchError):
    pass


class DegenerateInput(IfsearchError):
    """Too little variation in the input to learn from."""


class MissingModel(IfsearchError):
    """Sum-pooled descriptors require a whitening model to finalize."""


class MissingClassScores(IfsearchError):
    """Class-specific reranking needs per-proposal class scores."""


class MissingClassIndex(IfsearchError):
    """Class-specific reranking needs the query's class index."""
