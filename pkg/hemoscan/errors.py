"""
Exception hierarchy for hemoscan
Every error raised on purpose by the package derives from HemoscanError
"""


class HemoscanError(Exception):
    """Base class for all hemoscan errors"""


class ValidationError(HemoscanError, ValueError):
    """Invalid input, argument or configuration (CLI exit code 2)"""


class ConfigError(ValidationError):
    """Malformed or missing configuration value"""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


class ShapeError(ValidationError):
    """Operand shapes do not conform for an operation"""

    def __init__(self, op, shape_a, shape_b=None, detail=None):
        self.op = op
        self.shape_a = tuple(shape_a) if shape_a is not None else None
        self.shape_b = tuple(shape_b) if shape_b is not None else None
        message = f"{op}: incompatible shapes {self.shape_a} and {self.shape_b}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class TapeError(HemoscanError):
    """Backward pass requested on a tape that cannot provide it"""


class FormatError(HemoscanError):
    """A file does not match its declared on-disk format"""

    def __init__(self, path, message, offset=None, line=None):
        self.path = str(path)
        self.offset = offset
        self.line = line
        where = ""
        if offset is not None:
            where = f" at byte {offset}"
        elif line is not None:
            where = f" at line {line}"
        super().__init__(f"{self.path}{where}: {message}")


class TrainingDivergedError(HemoscanError):
    """Loss became NaN or infinite during training"""

    def __init__(self, stage, epoch, step, loss):
        self.stage = stage
        self.epoch = epoch
        self.step = step
        self.loss = loss
        super().__init__(f"{stage}: non-finite loss {loss} at epoch {epoch}, step {step}")


class ConvergenceError(HemoscanError):
    """Iterative solver stopped before reaching its tolerance"""

    def __init__(self, message, residual):
        self.residual = residual
        super().__init__(f"{message} (residual {residual:.3e})")
