"""Exception hierarchy shared by every coldboot module."""


class ColdbootError(Exception):
    """Base class for all coldboot errors."""


class NotFound(ColdbootError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class RangeError(ColdbootError, ValueError):
    pass


class BuildError(ColdbootError):
    pass


class TraceError(ColdbootError):
    pass


class FetchError(ColdbootError):
    pass


class ScanError(ColdbootError):
    def __init__(self, paths):
        self.paths = list(paths)
        super().__init__("unreadable paths: " + ", ".join(self.paths))


class DiffError(ColdbootError):
    pass


class ExpiredCache(ColdbootError):
    pass


class SnapshotFormatError(ColdbootError):
    pass


class PutError(ColdbootError):
    pass


class GetError(ColdbootError):
    pass


class MetricError(ColdbootError, ValueError):
    pass


class ReportError(ColdbootError):
    def __init__(self, conflicts):
        self.conflicts = list(conflicts)
        super().__init__(f"{len(self.conflicts)} overlapping span(s): {self.conflicts[:5]}")


class ConfigError(ColdbootError, ValueError):
    pass


class ProtocolError(ColdbootError):
    pass
