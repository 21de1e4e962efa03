"""Common error base class.

Every module defines its own specific exceptions; they all derive from
ToolkitError so batch drivers and the CLI can catch tool failures without
swallowing programming errors.
"""


class ToolkitError(Exception):
    pass


class IoFailure(ToolkitError):
    """Filesystem-level failure (missing file, permissions, short write)."""


class ShapeMismatch(ToolkitError):
    """Array arguments whose shapes violate an operation's contract."""

