"""Exception taxonomy shared across the toolkit.

CLI exit-code contract: ValidationError -> 1, FormatError and plain I/O
failures -> 2, anything unexpected -> 3.
"""


class ForgeError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(ForgeError):
    """Input violates a documented invariant (bad value, duplicate id, ...)."""


class FormatError(ForgeError):
    """File exists but its contents do not match the declared format."""
