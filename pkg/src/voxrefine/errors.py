"""Exception types shared across the library.

Three failure classes are distinguished so callers (and the CLI exit-code
mapping) can tell misuse of an API contract apart from bad configuration
and from shape/dimension mistakes.
"""


class ShapeError(ValueError):
    """Operand dimensions do not line up for the requested operation."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class ConfigError(ValueError):
    """A configuration value is out of its valid domain."""
