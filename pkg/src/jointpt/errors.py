"""Exception hierarchy shared across the package."""


class JointPTError(Exception):
    """Base class for every error raised by jointpt."""


class InvalidSystem(JointPTError, ValueError):
    pass


class InvalidBatch(JointPTError, ValueError):
    pass


class ParseError(JointPTError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SplitError(JointPTError, ValueError):
    pass


class GenerationError(JointPTError, RuntimeError):
    pass


class FitError(JointPTError, ValueError):
    pass


class LabelError(JointPTError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class StateError(JointPTError, RuntimeError):
    pass


class GraphError(JointPTError, ValueError):
    pass


class GeometryError(JointPTError, ValueError):
    pass


class ShapeError(JointPTError, ValueError):
    pass


class NonFiniteError(JointPTError, FloatingPointError):
    pass


class ConfigError(JointPTError, ValueError):
    pass


class HeadError(JointPTError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class CapabilityError(JointPTError, RuntimeError):
    pass


class EmbeddingError(JointPTError, ValueError):
    pass


class WeightError(JointPTError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class OptError(JointPTError, FloatingPointError):
    pass


class SamplerError(JointPTError, ValueError):
    pass


class CheckpointError(JointPTError, ValueError):
    pass


class MetricError(JointPTError, ValueError):
    pass
