"""Error taxonomy shared across the library and the CLI.

The CLI maps these onto process exit codes: ConfigError -> 1,
AuditError -> 2, DivergenceError -> 3.
"""


class LoopstackError(Exception):
    """Base class for all loopstack errors."""


class ConfigError(LoopstackError):
    """Invalid or inconsistent run configuration / CLI usage."""


class AuditError(LoopstackError):
    """A cache-protocol or accounting invariant was violated."""


class DivergenceError(LoopstackError):
    """Activations exceeded the divergence threshold or went non-finite."""


class WeightFormatError(LoopstackError):
    """Malformed, truncated or corrupt weight file."""
