"""Exception types shared across the package."""


class FeatboostError(Exception):
    """Base class for all library errors."""


class ShapeError(FeatboostError, ValueError):
    """Operands have incompatible or invalid dimensions."""


class ConfigError(FeatboostError, ValueError):
    """A configuration value or combination is invalid."""


class ContractError(FeatboostError, ValueError):
    """A documented precondition was violated by the caller."""


class DegenerateVectorError(FeatboostError, ValueError):
    """A vector with (near-)zero norm cannot be normalized."""


class EvaluationError(FeatboostError, ArithmeticError):
    """A function produced a non-finite value where a finite one is required."""


class UndefinedAPError(FeatboostError, ValueError):
    """Average precision is undefined: the anchor has no positive matches."""


class EmptyBatchError(FeatboostError, ValueError):
    """No anchor in the batch has a positive match, so the loss is undefined."""


class CalibrationError(FeatboostError, ValueError):
    """Not enough samples to estimate match statistics."""


class FormatError(FeatboostError, ValueError):
    """A serialized file is malformed.

    `offset` is the byte position at which the problem was detected.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DataGenError(FeatboostError, RuntimeError):
    """Synthetic scene generation failed after exhausting resample attempts."""


class LabelMismatchError(FeatboostError, ValueError):
    """Stored match labels disagree with labels recomputed from the warp.

    `mismatches` holds (anchor_index, target_index, stored, recomputed) tuples.
    """

    def __init__(self, mismatches):
        preview = ", ".join(str(m) for m in mismatches[:5])
        more = "" if len(mismatches) <= 5 else f" and {len(mismatches) - 5} more"
        super().__init__(f"label mismatch at {preview}{more}")
        self.mismatches = mismatches


class NumericalAbort(FeatboostError, ArithmeticError):
    """Training hit a non-finite loss or gradient and stopped."""
