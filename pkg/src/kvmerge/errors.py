"""Exception hierarchy shared across the package."""


class KVMergeError(ValueError):
    """Base class for every error raised by kvmerge."""


class ShapeError(KVMergeError):
    pass


class InvalidRangeError(KVMergeError):
    pass


class DegenerateRowError(KVMergeError):
    pass


class InvalidWindowError(KVMergeError):
    pass


class CorruptionError(KVMergeError):
    pass


class InfeasibleRemovalError(KVMergeError):
    pass


class LayoutError(KVMergeError):
    pass


class DomainError(KVMergeError):
    pass


class ScheduleError(KVMergeError):
    """Raised when a schedule fails validation; ``errors`` lists every violation."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class InfeasibleScheduleError(KVMergeError):
    def __init__(self, message, achievable=None):
        self.achievable = achievable
        super().__init__(message)


class FormatError(KVMergeError):
    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class ConfigError(KVMergeError):
    def __init__(self, message, key=None):
        self.key = key
        super().__init__(message if key is None else f"{key}: {message}")
