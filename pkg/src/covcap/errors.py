"""Exception hierarchy with stable machine-readable codes.

Validation errors map to CLI exit code 1, numerical failures to exit code 2.
"""


class CovcapError(Exception):
    code = "error"
    exit_code = 2


class ValidationError(CovcapError):
    code = "validation-error"
    exit_code = 1


class DimensionMismatch(ValidationError):
    code = "dimension-mismatch"


class NonFiniteData(ValidationError):
    code = "non-finite-data"


class MissingIntercept(ValidationError):
    code = "missing-intercept"


class MissingSeriesFile(ValidationError):
    code = "missing-series-file"


class RaggedRow(ValidationError):
    code = "ragged-row"


class NonNumericCell(ValidationError):
    code = "non-numeric-cell"


class DimensionExhausted(ValidationError):
    code = "dimension-exhausted"


class UsageError(ValidationError):
    code = "usage-error"


class NumericError(CovcapError):
    code = "numeric-error"
    exit_code = 2


class DegenerateShrinkage(NumericError):
    code = "degenerate-shrinkage"


class SingularDesign(NumericError):
    code = "singular-design"


class SingularH(NumericError):
    code = "singular-h"


class RankDeficientDesign(NumericError):
    code = "rank-deficient-design"


class NewtonDivergence(NumericError):
    code = "newton-divergence"


class IllPosedCAP(NumericError):
    code = "ill-posed-cap"


class SingularProjection(NumericError):
    code = "singular-projection"


class BootstrapFailure(NumericError):
    code = "bootstrap-failure"
