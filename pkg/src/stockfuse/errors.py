"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 1, data-shaped
errors -> 2, NumericError -> 3.
"""


class StockfuseError(Exception):
    """Base class for all package errors."""


class ConfigError(StockfuseError):
    """Invalid or inconsistent configuration."""


class DataError(StockfuseError):
    """Input data violates a documented contract."""


class FormatError(DataError):
    """A file is structurally malformed (missing columns, bad container)."""


class MissingEmbeddingError(DataError):
    """Documents exist for a (symbol, date) but no embedding is cached."""

    def __init__(self, keys):
        self.keys = list(keys)
        preview = ", ".join(map(str, self.keys[:5]))
        more = "" if len(self.keys) <= 5 else f" (+{len(self.keys) - 5} more)"
        super().__init__(f"no cached embedding for: {preview}{more}")


class ProviderError(StockfuseError):
    """The embeddings provider failed after retries."""


class ContractError(ProviderError):
    """The provider returned a payload violating the wire contract."""


class ShapeError(StockfuseError):
    """Tensor shapes incompatible with the requested operation."""


class NumericError(StockfuseError):
    """A non-finite value was produced where finiteness is required."""


class CheckpointError(StockfuseError):
    """A checkpoint file is unreadable, truncated, or version-incompatible."""
