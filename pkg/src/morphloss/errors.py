"""Shared exception base so the CLI can map failures to exit codes."""


class MorphlossError(Exception):
    """Base class for all errors raised by this package."""


class ConfigInvalid(MorphlossError):
    """A configuration value or combination is unusable."""
