"""Exception hierarchy. CLI exit codes hang off these classes."""


class KQuantError(Exception):
    exit_code = 1


class ConfigError(KQuantError, ValueError):
    exit_code = 2


class ModelStateError(KQuantError):
    exit_code = 3


class NumericError(KQuantError, ArithmeticError):
    exit_code = 4


class DomainError(NumericError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class AccumulatorOverflow(NumericError, OverflowError):
    """Worst-case accumulator magnitude does not fit the integer datapath."""


class DegenerateTableError(NumericError):
    """Rounding collapsed two activation thresholds (sigma too small for b_a)."""


class DegenerateWeightsError(NumericError):
    """Weight tensor has zero spread, so the CDF quantizer is undefined."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""


class ShapeError(KQuantError, ValueError):
    exit_code = 3
