"""Exception types shared by every package."""


class EweError(Exception):
    """Base class for all errors raised by this project."""


class ContractError(EweError, ValueError):
    """A precondition of an operation does not hold."""


class FormatError(EweError, ValueError):
    """A file on disk does not follow its documented binary layout."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class ConfigError(EweError, ValueError):
    """Bad configuration: unknown key, nested value or unparsable entry."""


class UnverifiableError(ContractError):
    """Ownership cannot be tested because the success rate does not beat the false rate."""
