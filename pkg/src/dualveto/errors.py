"""Exception hierarchy shared by all modules.

Two top-level families map onto CLI exit codes: ValidationError (bad
inputs or unusable configuration, exit 1) and NumericalError (a
computation that cannot be completed reliably, exit 2). Every exception
carries the name of the module that raised it so CLI error text can name
the origin.
"""


class DualVetoError(Exception):
    module = "dualveto"
    exit_code = 1


class ValidationError(DualVetoError):
    exit_code = 1


class NumericalError(DualVetoError):
    exit_code = 2


class UndefinedMetric(DualVetoError):
    """A statistic has no value on the given records.

    Bootstrap resampling treats these as skippable; everywhere else they
    propagate like validation errors.
    """

    module = "metrics"


# dataset_io

class CohortValidationError(ValidationError):
    module = "dataset_io"


class MissingColumn(CohortValidationError):
    pass


class NonFiniteValue(CohortValidationError):
    pass


class InconsistentDimension(CohortValidationError):
    pass


class DuplicateKey(CohortValidationError):
    pass


class InconsistentMembers(CohortValidationError):
    pass


class EmptySplit(CohortValidationError):
    pass


class UnknownId(CohortValidationError):
    pass


# temperature

class SingleClassCalibrationSet(ValidationError):
    module = "temperature"


class NonFiniteLogit(ValidationError):
    module = "temperature"


# conformal

class MissingClassInCalibration(ValidationError):
    module = "conformal"


class AlphaOutOfRange(ValidationError):
    module = "conformal"


# geometry

class ZeroVector(ValidationError):
    module = "geometry"


class TooFewPoints(ValidationError):
    module = "geometry"


class DegenerateResiduals(ValidationError):
    module = "geometry"


class UnfittedModel(ValidationError):
    module = "geometry"


class NoCorrectSamplesForClass(ValidationError):
    module = "geometry"


class IllConditionedCovariance(NumericalError):
    module = "geometry"


# policy

class UnfittedCalibrator(ValidationError):
    module = "policy"


class ConfigMismatch(ValidationError):
    module = "policy"


# metrics

class EmptyEvaluationSet(UndefinedMetric):
    pass


class NoPositiveEvidence(UndefinedMetric):
    pass


class NoPositiveRecords(UndefinedMetric):
    pass


class DegenerateExpectedCost(NumericalError):
    module = "metrics"


class TooFewRecords(ValidationError):
    module = "metrics"


# synthgen

class ConfigInvariantViolation(ValidationError):
    module = "synthgen"


# cli

class DimensionMismatch(ValidationError):
    module = "cli"


class ConfigError(ValidationError):
    module = "cli"
