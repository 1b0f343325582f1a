"""Exception hierarchy shared across the package."""


class DLAError(Exception):
    """Base class for every error raised by dlapprox."""


class InvalidArgument(DLAError, ValueError):
    pass


class NumericError(DLAError, ArithmeticError):
    def __init__(self, message, dims=None):
        super().__init__(message if dims is None else f"{message} (matrix dims {dims[0]}x{dims[1]})")
        self.dims = dims


class GraphError(DLAError):
    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class ValidationError(DLAError):
    """Raised when a model fails validation; carries the violation list."""

    def __init__(self, violations):
        self.violations = list(violations)
        lines = "; ".join(str(v) for v in self.violations)
        super().__init__(f"model failed validation: {lines}")


class ExecutionError(DLAError):
    def __init__(self, message, node=None):
        super().__init__(f"{node}: {message}" if node else message)
        self.node = node


class ComparisonError(DLAError):
    pass


class StaleGroupError(DLAError):
    pass


class ParseError(DLAError):
    """Base for model file parse failures."""

    def __init__(self, message, offset=None, name=None):
        where = []
        if offset is not None:
            where.append(f"offset {offset}")
        if name is not None:
            where.append(f"'{name}'")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.offset = offset
        self.name = name


class MagicMismatch(ParseError):
    pass


class VersionMismatch(ParseError):
    pass


class TruncatedBlob(ParseError):
    pass


class DanglingTensorRef(ParseError):
    pass


class ManifestError(ParseError):
    pass


class CandidateSkipped(Exception):
    """Signal (not an error) that a factorization produced no usable candidate."""


class CandidateRejected(CandidateSkipped):
    """The candidate does not strictly reduce FLOPs."""


class NotApplicable(CandidateSkipped):
    """The factorization kind does not apply to this layer."""
