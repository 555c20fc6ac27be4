import traceback
from dataclasses import dataclass
from functools import wraps
from typing import Any, Dict, Optional

import structlog

logger = structlog.get_logger()

EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_NUMERICAL = 3


@dataclass
class ErrorResponse:
    message: str
    error_type: str
    exit_code: int
    details: Optional[Dict[str, Any]] = None

    def to_dict(self) -> Dict[str, Any]:
        return {"message": self.message, "error_type": self.error_type, "exit_code": self.exit_code, "details": self.details}


class BaseError(Exception):
    default_exit_code = EXIT_NUMERICAL

    def __init__(
        self,
        message: str,
        exit_code: Optional[int] = None,
        details: Optional[Dict[str, Any]] = None,
    ):
        self.message = message
        self.exit_code = self.default_exit_code if exit_code is None else exit_code
        self.details = details
        super().__init__(self.message)


# Validation family (exit 1)


class ValidationError(BaseError):
    default_exit_code = EXIT_VALIDATION


class ConfigurationError(ValidationError):
    pass


class EmptyCloudError(ValidationError):
    pass


class CardinalityMismatchError(ValidationError):
    pass


class SimplexViolationError(ValidationError):
    pass


class NonPositiveSizeError(ValidationError):
    pass


class NonFiniteValueError(ValidationError):
    pass


class IdentifierMismatchError(ValidationError):
    pass


class BundleFormatError(ValidationError):
    pass


# IO family (exit 2)


class BundleIOError(BaseError):
    default_exit_code = EXIT_IO


# Numerical family (exit 3)


class NumericalError(BaseError):
    default_exit_code = EXIT_NUMERICAL


class DegenerateInputError(NumericalError):
    pass


class DegenerateConfigurationError(NumericalError):
    pass


class NoConsensusError(NumericalError):
    pass


class NoInliersError(NumericalError):
    pass


class DivergenceError(NumericalError):
    pass


class GradientCheckError(NumericalError):
    pass


def handle_errors(func: Any) -> Any:
    """Run `func`, turning raised errors into an ErrorResponse instead of propagating."""

    @wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return func(*args, **kwargs)
        except BaseError as e:
            logger.error(
                "Application error",
                error_type=e.__class__.__name__,
                message=str(e),
                details=e.details,
                exit_code=e.exit_code,
                traceback=traceback.format_exc(),
            )
            return ErrorResponse(
                message=str(e),
                error_type=e.__class__.__name__,
                exit_code=e.exit_code,
                details=e.details,
            )
        except Exception as e:
            logger.error(
                "Unexpected error",
                error_type=e.__class__.__name__,
                message=str(e),
                traceback=traceback.format_exc(),
            )
            return ErrorResponse(
                message="An unexpected error occurred",
                error_type="UnexpectedError",
                exit_code=EXIT_NUMERICAL,
                details={"original_error": str(e)},
            )

    return wrapper
