"""Exception hierarchy shared by all grancount modules.

Two categories matter to callers (and to the CLI exit codes): inputs or
configuration that violate a contract, and numerical failures encountered
while honouring a valid contract.
"""


class GrancountError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(GrancountError, ValueError):
    """Invalid inputs, malformed files, or configuration errors."""


class NumericalError(GrancountError, ArithmeticError):
    """Valid inputs led to a numerical failure (overflow, all-divergent chains, ...)."""
