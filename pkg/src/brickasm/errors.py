"""Exception types raised across the package."""


class BrickAsmError(Exception):
    """Base class for all package errors."""


class BehindCamera(BrickAsmError):
    pass


class GenerationExhausted(BrickAsmError):
    pass


class EmptyDataset(BrickAsmError):
    pass


class InsufficientViews(BrickAsmError):
    pass


class DegenerateGeometry(BrickAsmError):
    pass


class NoVisibleViews(BrickAsmError):
    pass


class NoFeasiblePose(BrickAsmError):
    pass


class NonFiniteLoss(BrickAsmError):
    pass


class CyclicGraph(BrickAsmError):
    pass


class MissingAssignment(BrickAsmError):
    pass


class EmptyInput(BrickAsmError):
    pass


class SchemaError(BrickAsmError):
    """Raised when a JSON document does not match its format.

    ``pointer`` is a JSON pointer to the offending field.
    """

    def __init__(self, message, pointer=""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer or "/"
