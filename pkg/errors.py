class SynergyLabError(Exception):
    """Base class for all errors raised by the lab"""


class ConfigurationError(SynergyLabError):
    """Inconsistent dimensions, unknown ids or an invalid setup"""


class ConfigError(ConfigurationError):
    """Invalid experiment config file"""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConstructionError(SynergyLabError):
    """A loss graph was built from something diffnet cannot differentiate"""


class DomainError(SynergyLabError):
    """Numerical input outside the domain of an operation"""


class TrainingError(SynergyLabError):
    """Runtime failure while training"""

    def __init__(self, message, dump_path=None):
        self.dump_path = dump_path
        super().__init__(message)


class StaleBatchError(TrainingError):
    pass


class DivergenceError(TrainingError):
    pass


class DecoderMutatedError(TrainingError):
    pass
