"""Exception hierarchy shared across the package."""


class QueryNavError(Exception):
    """Base class; ``kind`` is the machine-readable tag the CLI emits."""

    kind = "error"


class ConfigError(QueryNavError):
    kind = "config_error"


class InputError(QueryNavError):
    kind = "input_error"


class SamplingError(QueryNavError):
    kind = "sampling_error"


class ParseError(QueryNavError):
    kind = "parse_error"


class TrainingError(QueryNavError):
    kind = "training_error"


class UsageError(QueryNavError):
    kind = "usage_error"


class ScheduleError(QueryNavError):
    kind = "schedule_error"
