class LabError(Exception):
    """Base class for every error the lab raises on purpose"""
    exit_code = 1


# ===============================
# Markov chains
# ===============================
class ChainError(LabError):
    def __init__(self, message, states=None):
        super().__init__(message)
        self.states = list(states) if states is not None else []


class NotStochastic(ChainError):
    pass


class Reducible(ChainError):
    pass


class Periodic(ChainError):
    def __init__(self, message, states=None, period=None):
        super().__init__(message, states)
        self.period = period


class SingularSystem(ChainError):
    pass


# ===============================
# Shapes, indices, arguments
# ===============================
class DimensionMismatch(LabError, ValueError):
    pass


class IndexOutOfRange(LabError, IndexError):
    pass


class NonPositiveArgument(LabError, ValueError):
    pass


class NonFiniteIterate(LabError):
    def __init__(self, step, replica=None):
        where = f" in replica {replica}" if replica is not None else ""
        super().__init__(f"Non-finite iterate at step {step}{where}")
        self.step = step
        self.replica = replica

    def with_replica(self, replica):
        return NonFiniteIterate(self.step, replica)

    def __reduce__(self):
        return (NonFiniteIterate, (self.step, self.replica))


# ===============================
# Configuration and acceptance
# ===============================
class ConfigError(LabError):
    exit_code = 2


class ConfigParseError(ConfigError):
    def __init__(self, message, line=None, column=None):
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)
        self.line = line
        self.column = column


class ConfigValidationError(ConfigError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class AcceptanceFailure(LabError):
    exit_code = 3

    def __init__(self, failed):
        super().__init__("Failed checks: " + ", ".join(failed))
        self.failed = list(failed)
