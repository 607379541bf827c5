"""
Errors for OpenSetMargin - Exception hierarchy module.
Every failure raised by the package derives from OpenSetMarginError so the CLI can map it to an exit code.
"""


class OpenSetMarginError(Exception):
    """Base class for all package errors"""


class ConfigValidationError(OpenSetMarginError):
    """Invalid configuration value, unknown config key or bad command-line value"""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class ShapeError(OpenSetMarginError):
    """Operand shapes do not fit the operation"""


class ContractError(OpenSetMarginError):
    """A precondition of an operation was violated"""


class DataParseError(OpenSetMarginError):
    """A dataset file row could not be parsed"""

    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class DataSchemaError(OpenSetMarginError):
    """A dataset file is empty or structurally inconsistent"""


class GenerationError(OpenSetMarginError):
    """The synthetic generator could not satisfy its configuration"""


class TrainingDivergedError(OpenSetMarginError):
    """A loss became NaN or infinite during training"""

    def __init__(self, message, component=None):
        super().__init__(message)
        self.component = component


class CheckpointError(OpenSetMarginError):
    """A checkpoint file is missing, malformed or incompatible"""
