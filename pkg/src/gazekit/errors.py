class GazekitError(Exception):
    exit_code = 1


class ConfigError(GazekitError, ValueError):
    exit_code = 2


class DataError(GazekitError):
    exit_code = 3


class TrainingError(GazekitError):
    exit_code = 4
