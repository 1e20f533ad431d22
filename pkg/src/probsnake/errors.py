"""Exception hierarchy shared by every stage of the pipeline."""


class ProbSnakeError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for this failure."""

    exit_code = 3


class ParameterError(ProbSnakeError, ValueError):
    exit_code = 1


class InputFormatError(ProbSnakeError):
    exit_code = 2


class FormatError(InputFormatError):
    """Malformed volume header."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


class TruncationError(InputFormatError):
    pass


class UnsupportedTypeError(InputFormatError):
    pass


class ShapeError(InputFormatError, ValueError):
    pass


class BoundsError(InputFormatError, IndexError):
    pass


class RangeError(ProbSnakeError, ValueError):
    """A value cannot be represented in the requested element type."""

    exit_code = 2

    def __init__(self, index, value, element_type):
        self.index = index
        self.value = value
        super().__init__(
            f"voxel {index} has value {value!r}, outside the range of {element_type}"
        )


class DegenerateInputError(ProbSnakeError):
    pass


class FitError(ProbSnakeError):
    """Mixture fit failed; ``params`` holds the last iterate."""

    def __init__(self, message, params=None):
        self.params = params
        super().__init__(message)


class NoThresholdError(ProbSnakeError):
    pass


class EmptyInitializationError(ProbSnakeError):
    pass


class NumericalError(ProbSnakeError):
    def __init__(self, message, iteration=None):
        self.iteration = iteration
        super().__init__(message)


class EmptyResultError(ProbSnakeError):
    pass
