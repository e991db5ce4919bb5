"""Shared exception types."""


class InputError(ValueError):
    """Malformed or inconsistent input."""


class CapabilityError(RuntimeError):
    """A requested operator/kernel/domain combination is not supported."""


class ConditioningError(RuntimeError):
    """A linear-algebra factorization failed even after nugget escalation."""
