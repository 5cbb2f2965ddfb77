"""
This module contains the exception classes raised by the pipeline. Every error
carries a stable ``code`` so that the command line interface can report it as
machine-readable JSON.

>>> try:
...     raise FormatError("payload has 7 bytes, expected 8")
... except BodyCompError as e:
...     e.to_json()
{'error': 'format_error', 'message': 'payload has 7 bytes, expected 8'}
"""


class BodyCompError(Exception):
    """
    Base class of every error raised by this package.
    """
    code = "bodycomp_error"

    def to_json(self):
        """
        Machine-readable form of the error.

        :return: a dictionary with the error code and message
        :rtype: {str : str}
        """
        return {"error": self.code, "message": str(self)}


class FormatError(BodyCompError, ValueError):
    """
    A file or in-memory structure does not match its documented format.
    """
    code = "format_error"


class ConfigError(FormatError):
    """
    A JSON configuration file has unknown keys, missing keys, or values that
    violate the invariants of its dataclass.
    """
    code = "config_error"


class EmptyInputError(BodyCompError, ValueError):
    """
    An operation that needs at least one element received none (empty point
    cloud, empty mesh, empty dataset).
    """
    code = "empty_input"


class DegenerateSectionError(BodyCompError, ValueError):
    """
    A cross section has fewer than three points or all of its points are
    collinear, so no convex hull perimeter exists.
    """
    code = "degenerate_section"

    def __init__(self, message, keypoint=None):
        super().__init__(message)
        self.keypoint = keypoint

    def to_json(self):
        data = super().to_json()
        if self.keypoint is not None:
            data["keypoint"] = self.keypoint
        return data


class RetryBudgetError(BodyCompError, RuntimeError):
    """
    Resampling did not produce a valid body within the allowed retries.
    """
    code = "retry_budget_exhausted"


class NonFiniteGradientError(BodyCompError, FloatingPointError):
    """
    A gradient block contains NaN or Inf values.
    """
    code = "non_finite_gradient"

    def __init__(self, block):
        super().__init__(f"non-finite gradient in parameter block '{block}'")
        self.block = block

    def to_json(self):
        data = super().to_json()
        data["block"] = self.block
        return data


class CheckpointNotFoundError(BodyCompError, FileNotFoundError):
    """
    The checkpoint directory or one of its files does not exist.
    """
    code = "checkpoint_not_found"


class UndefinedMetricError(BodyCompError, ValueError):
    """
    A metric is undefined for its input, e.g. Pearson r with zero variance.
    """
    code = "undefined_metric"
