"""Exception hierarchy shared by all modules."""


class ModelError(Exception):
    """Base class for every error raised by rramgen."""


class FeatureExtractionError(ModelError):
    pass


class NoSetDetected(FeatureExtractionError):
    pass


class NoResetDetected(FeatureExtractionError):
    pass


class TooFewValidCycles(ModelError):
    pass


class IllConditionedFit(ModelError):
    pass


class DegenerateDevice(ModelError):
    pass


class NonMonotoneFit(ModelError):
    pass


class UnstableProcess(ModelError):
    def __init__(self, radius, msg=None):
        self.radius = float(radius)
        super().__init__(msg or f"VAR process is not stationary (spectral radius {self.radius:.6f} >= 1)")


class SingularComponent(ModelError):
    pass


class NoConvergence(ModelError):
    def __init__(self, msg, report=None):
        self.report = report
        super().__init__(msg)


class SchemaMismatch(ModelError):
    pass


class ParseError(ModelError):
    pass
