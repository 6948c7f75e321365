"""Exception hierarchy shared by all heatlens modules.

Every error carries a CLI exit code so the command-line front end can map
failures without inspecting message text.
"""


class HeatlensError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class InvalidParameterError(HeatlensError, ValueError):
    """A caller-supplied parameter is malformed or out of range."""

    exit_code = 2


class IngestionError(HeatlensError, ValueError):
    """A mesh or descriptor file is structurally invalid.

    Messages name the offending entity (vertex, face or edge index) so the
    file can be repaired.
    """

    exit_code = 2


class FormatError(IngestionError):
    """A file is not in a supported format."""

    exit_code = 2


class GridMismatchError(InvalidParameterError):
    """A field's sample count does not match the space it is used with."""

    exit_code = 2


class CapabilityError(HeatlensError):
    """The requested operation is not supported by this backend."""

    exit_code = 3


class TruncationError(HeatlensError):
    """The retained spectrum is too short for the requested time scale.

    Raised when the estimated series tail exceeds tolerance; the remedy is a
    larger mode count (or a larger time).
    """

    exit_code = 3


class SolverError(HeatlensError):
    """An underlying numerical solver failed to converge."""

    exit_code = 4
