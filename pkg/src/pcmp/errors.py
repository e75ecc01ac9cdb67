"""Exception hierarchy shared by every pcmp module."""


class PcmpError(Exception):
    """Base class; the CLI maps subclasses to exit codes."""


class ConfigError(PcmpError, ValueError):
    pass


class DataError(PcmpError):
    pass


class ParseError(DataError):
    pass


class EmptyCloud(DataError):
    pass


class NotNormalized(DataError):
    pass


class InvalidDataset(DataError):
    pass


class TableMismatch(DataError):
    pass


class CacheCorrupt(DataError):
    pass


class CorruptStream(PcmpError):
    pass


class DepthOutOfRange(PcmpError, ValueError):
    pass


class DomainError(PcmpError, ValueError):
    pass
