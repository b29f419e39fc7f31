"""Custom exceptions for the relocalization pipeline."""

from dataclasses import dataclass
from typing import Optional


@dataclass
class ErrorInfo:
    """Structured error information for reports and API responses."""
    type: str
    message: str
    exit_code: int
    source_line_no: Optional[int] = None
    source_text: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "type": self.type,
            "message": self.message,
            "exit_code": self.exit_code,
            "source_line_no": self.source_line_no,
            "source_text": self.source_text,
        }


class RelocError(Exception):
    """Base exception for all pipeline errors."""

    exit_code = 5

    def __init__(
        self,
        message: str,
        source_line_no: Optional[int] = None,
        source_text: Optional[str] = None,
    ):
        super().__init__(message)
        self.message = message
        self.source_line_no = source_line_no
        self.source_text = source_text

    def to_error_info(self) -> ErrorInfo:
        return ErrorInfo(
            type=self.__class__.__name__,
            message=self.message,
            exit_code=self.exit_code,
            source_line_no=self.source_line_no,
            source_text=self.source_text,
        )


class InvalidConfig(RelocError, ValueError):
    """Option value outside its allowed range."""
    exit_code = 2


class InvalidSpec(InvalidConfig):
    """Synthetic scene specification violates its invariants."""
    pass


class DataError(RelocError):
    """Input data is malformed or inconsistent."""
    exit_code = 3


class ParseError(DataError):
    """Error while reading a text or binary artifact."""
    pass


class ValidationError(DataError):
    """Parsed data violates a model invariant."""
    pass


class UnknownImage(DataError, KeyError):
    """Image id is not part of the scene model."""

    def __init__(self, image_id: int):
        super().__init__(f"Unknown image id: {image_id}")
        self.image_id = image_id

    def __str__(self) -> str:
        return self.message


class DimensionMismatch(DataError):
    """Array shapes or list lengths disagree."""
    pass


class OutOfBounds(DataError, IndexError):
    """Pixel lies outside an image grid."""
    pass


class MissingLabels(DataError):
    """Region label maps are missing or lack a region class."""
    pass


class GeometryError(RelocError):
    """Geometric computation cannot be carried out."""
    exit_code = 4


class BehindCamera(GeometryError):
    """Point has non-positive (or below-floor) depth."""

    def __init__(self, message: str, index: Optional[int] = None):
        super().__init__(message)
        self.index = index


class DegenerateConfiguration(GeometryError):
    """Minimal or linear solver input is degenerate."""
    pass


class RankDeficient(DegenerateConfiguration):
    """Linear system has more than one null direction."""
    pass


class LocalizationError(RelocError):
    """Frame could not be localized."""
    exit_code = 4


class InsufficientKeypoints(LocalizationError):
    """Not enough keypoints survived selection."""

    def __init__(self, which_set: str, found: int, required: Optional[int] = None):
        needed = f" of {required}" if required is not None else ""
        super().__init__(f"insufficient keypoints in {which_set} set: found {found}{needed}")
        self.which_set = which_set
        self.found = found
        self.required = required


class TooFewCorrespondences(LocalizationError):
    """RANSAC needs at least four correspondences."""
    pass


class TooFewInliers(LocalizationError):
    """Refinement needs at least four inliers."""
    pass


class NoValidHypothesis(LocalizationError):
    """Every RANSAC sample was degenerate."""
    pass


class LocalizationFailed(LocalizationError):
    """Per-frame failure recorded by the evaluation runners."""
    pass


class ModelError(RelocError):
    """Regressor misuse or training failure."""
    exit_code = 5


class ShapeMismatch(ModelError):
    """Input image does not match the regressor configuration."""
    pass


class StaleForward(ModelError):
    """Backward called without a matching forward pass."""
    pass


class EmptyDataset(ModelError):
    """Training dataset has no samples."""
    exit_code = 2


class InvariantViolation(RelocError):
    """Internal consistency check failed."""
    exit_code = 5
