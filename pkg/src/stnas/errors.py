"""Exception hierarchy. Each category maps to a distinct CLI exit code."""


class STNASError(Exception):
    exit_code = 1


class DimensionError(STNASError, ValueError):
    exit_code = 3


class NumericError(STNASError, ArithmeticError):
    exit_code = 4


class DivergedError(NumericError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class DegenerateInputError(STNASError, ValueError):
    exit_code = 4


class StateError(STNASError, RuntimeError):
    exit_code = 5


class ContractError(STNASError, ValueError):
    exit_code = 5


class GenotypeParseError(STNASError, ValueError):
    exit_code = 2

    def __init__(self, message, position=None):
        super().__init__(message)
        self.position = position


class DataFormatError(STNASError, ValueError):
    exit_code = 6

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset
