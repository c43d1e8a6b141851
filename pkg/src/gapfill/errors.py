"""Exception taxonomy shared by the library, the service, and the CLI.

Exit-code mapping used by the CLI (and mirrored by the HTTP error payloads):
usage/config errors -> 1, data errors -> 2, numeric failures -> 3.
"""


class GapfillError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ConfigError(GapfillError):
    """Bad configuration: unknown keys, invalid values, shape/layer mismatches."""

    exit_code = 1


class UsageError(GapfillError):
    """Bad CLI/service invocation."""

    exit_code = 1


class DataError(GapfillError):
    """Problems with input data files or payloads."""

    exit_code = 2


class ParseError(DataError):
    """Non-numeric cell or otherwise unparseable content (carries row/column)."""


class FormatError(DataError):
    """Structurally malformed input (ragged rows, bad checkpoint bytes)."""


class RangeError(DataError):
    """Numeric argument outside its documented range."""


class NumericError(GapfillError):
    """Non-finite values encountered where finiteness is an invariant."""

    exit_code = 3


class DimensionError(NumericError):
    """Tensor operands with incompatible shapes."""

    exit_code = 1


class ContractError(GapfillError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""

    exit_code = 1


class GraphReuseError(ContractError):
    """backward() invoked twice on the same recorded forward pass."""


class OracleInvalidError(ContractError):
    """Gradient-check target is not deterministic across repeated evaluations."""


class DegenerateBatchError(ContractError):
    """Contrastive batch too small to provide any negative sample."""


class UndefinedMetricError(DataError):
    """Metric requested over an empty evaluation mask."""
