"""Exception types shared across the package."""


class MementityError(Exception):
    """Base class for all errors raised by this package."""


class UriParseError(MementityError):
    """A URI could not be parsed or normalized.

    ``offset`` is the byte offset of the first offending character.
    """

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class DatetimeError(MementityError):
    """A memento datetime failed validation in either representation."""


class ValidationError(MementityError):
    """A domain value violates one of its invariants."""


class CdxjParseError(MementityError):
    """A CDXJ document is structurally or syntactically invalid.

    ``line`` is the 1-based line number of the offending line.
    """

    def __init__(self, message: str, line: int = 0):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line
        self.message = message


class LinkParseError(MementityError):
    """A link-format document could not be parsed in strict mode."""


class JsonParseError(MementityError):
    """A JSON TimeMap document could not be parsed."""


class MergeError(MementityError):
    """TimeMap parts handed to the merge step are inconsistent."""


class ConfigError(MementityError):
    """A service or topology configuration is invalid."""


class AuthenticationError(MementityError):
    """Credentials were rejected by the access gateway."""


class UnknownSourceError(MementityError):
    """A token was requested for a source the gateway does not know."""


class EnrichmentError(MementityError):
    """A content-attribute fetch or derived-attribute submission failed."""
