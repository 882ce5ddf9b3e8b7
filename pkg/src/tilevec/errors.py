"""Exception taxonomy.

Two top-level families map onto the CLI exit codes: bad caller input
(exit 2) and broken engine invariants (exit 3).
"""


class EngineError(Exception):
    """Base class for all engine errors."""


class InputError(EngineError):
    """Caller-supplied data or parameters are invalid (CLI exit code 2)."""


class InvariantViolation(EngineError):
    """An internal contract was broken; indicates a bug (CLI exit code 3)."""


class ShapeError(InputError):
    """Operand shapes are inconsistent or not tile-compatible."""


class CapacityError(InputError):
    """A buffer, registry, or staging budget would be exceeded."""


class InvalidHandleError(InputError):
    """Unknown or unmapped shared-buffer handle."""


class DuplicateRegistrationError(InputError):
    """Buffer is already registered with the sharing fabric."""


class DuplicateIdError(InputError):
    """Record id already present in the index."""


class PersistenceError(InputError):
    """Index file is malformed, truncated, or version-incompatible."""


class DeviceConstraintError(InvariantViolation):
    """A batch violating device constraints reached a backend (routing bug)."""
