"""Exception hierarchy. Each family maps to a CLI exit code."""


class CoalitionError(Exception):
    exit_code = 1


class ConfigurationError(CoalitionError):
    exit_code = 2


class InfeasibleError(CoalitionError):
    exit_code = 3


class DataError(CoalitionError):
    exit_code = 4


class WeatherParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class AlignmentError(DataError):
    pass


class ValidationError(DataError):
    pass


class EmptyRangeError(ConfigurationError):
    pass


class DegenerateSeriesError(DataError):
    def __init__(self, agent_id):
        self.agent_id = agent_id
        super().__init__(f"trace of agent {agent_id!r} has zero variance; correlation undefined")


class InsufficientDataError(DataError):
    pass


class DegenerateParametersError(ValueError):
    pass


class MembershipError(ValueError):
    pass


class StageDependencyError(DataError):
    def __init__(self, path):
        self.path = path
        super().__init__(f"missing upstream artifact: {path}")
