"""Exception hierarchy. Each module raises its own subclass so the CLI can map
failures to distinct exit codes."""


class OsaError(ValueError):
    exit_code = 1


class DspError(OsaError):
    exit_code = 3


class PhysioError(OsaError):
    exit_code = 4


class DatasetError(OsaError):
    exit_code = 5


class ModelError(OsaError):
    exit_code = 6


class EventsError(OsaError):
    exit_code = 7


class MetricsError(OsaError):
    exit_code = 8


class SynthError(OsaError):
    exit_code = 9
