"""Exception types shared across the package."""


class PRFLError(Exception):
    pass


class ConfigurationError(PRFLError, ValueError):
    """Invalid configuration value. ``key`` names the offending setting when known."""

    def __init__(self, message, key=None, line=None):
        super().__init__(message)
        self.key = key
        self.line = line


class ShapeError(PRFLError, ValueError):
    pass


class InputError(PRFLError, ValueError):
    pass


class ContractError(PRFLError):
    pass


class CompressionError(PRFLError):
    pass


class CorruptUpdateError(PRFLError):
    pass


class ProtocolError(PRFLError):
    pass


class EmptyClientError(PRFLError):
    """Raised by a local update when the client holds no training samples."""


class DivergenceError(PRFLError):
    """A local phase produced values that cannot be represented on the wire."""


class DecodeError(PRFLError):
    pass


class BadMagicError(DecodeError):
    pass


class BadVersionError(DecodeError):
    pass


class TruncatedError(DecodeError):
    pass


class ChecksumError(DecodeError):
    pass


class MalformedError(DecodeError):
    pass


class LoadError(PRFLError):
    pass


class DatasetMagicError(LoadError):
    pass


class DatasetVersionError(LoadError):
    pass


class DatasetSizeError(LoadError):
    pass


class DatasetChecksumError(LoadError):
    pass


class DatasetValidationError(LoadError):
    pass
