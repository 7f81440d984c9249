"""
Module: utils.errors
-------------------

This module defines the exception classes used across protoocc-desk to
standardize error reporting, together with the two translations of those
errors to the outside world: FastAPI exception handlers for the HTTP surface
and process exit codes for the command-line interface.

Key Components:
- ProtoOccError: root of the hierarchy. Every error carries a human-readable
  ``detail`` string.
- Validation family (exit code 1, HTTP 400):
  - DimensionError: tensor shapes do not compose; both shapes are reported.
  - ParameterError: a scalar parameter is outside its admissible range.
  - ConfigError: a configuration is inconsistent with data or a checkpoint;
    the offending field is named.
  - DataError: data values are invalid (e.g. a label >= L).
- EvaluationError: a function under gradient check returned a non-finite value.
- GenerationError: procedural scene placement could not be satisfied.
- TrainingError: a loss component became non-finite during training.
- FormatError: a scene or checkpoint file has a bad magic, version or is
  truncated (exit code 2, like any I/O failure).

Usage:
- Raise these in the service layer; the CLI calls ``exit_code_for`` and the
  API registers ``register_exception_handlers`` at start-up.
"""

import logging

from fastapi import Request
from fastapi.encoders import jsonable_encoder
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import ValidationError as PydanticValidationError
from starlette.status import (
    HTTP_400_BAD_REQUEST,
    HTTP_422_UNPROCESSABLE_ENTITY,
    HTTP_500_INTERNAL_SERVER_ERROR,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2

# --- Custom Exception Classes ---


class ProtoOccError(Exception):
    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class ValidationError(ProtoOccError):
    """Input failed a validation check."""


class DimensionError(ValidationError):
    pass


class ParameterError(ValidationError):
    pass


class ConfigError(ValidationError):
    def __init__(self, detail: str, field: str = ""):
        super().__init__(f"{field}: {detail}" if field else detail)
        self.field = field


class DataError(ValidationError):
    pass


class EvaluationError(ProtoOccError):
    pass


class GenerationError(ProtoOccError):
    pass


class TrainingError(ProtoOccError):
    def __init__(self, detail: str, component: str = ""):
        super().__init__(detail)
        self.component = component


class FormatError(ProtoOccError):
    pass


def exit_code_for(exc: BaseException) -> int:
    """Map an exception raised by a command to the CLI exit code."""
    if isinstance(exc, (FormatError, OSError)):
        return EXIT_IO
    if isinstance(exc, (ProtoOccError, PydanticValidationError, ValueError)):
        return EXIT_VALIDATION
    raise exc


# --- Global Exception Handlers ---


async def validation_error_handler(request: Request, exc: PydanticValidationError):
    return JSONResponse(
        status_code=HTTP_400_BAD_REQUEST,
        content={"detail": "Validation error", "errors": exc.errors(include_context=False)},
    )


async def protoocc_validation_handler(request: Request, exc: ValidationError):
    logger.error(f"Validation error: {exc.detail}")
    return JSONResponse(
        status_code=HTTP_400_BAD_REQUEST,
        content={"error": exc.detail, "type": type(exc).__name__},
    )


async def format_error_handler(request: Request, exc: FormatError):
    logger.error(f"Format error: {exc.detail}")
    return JSONResponse(
        status_code=HTTP_400_BAD_REQUEST,
        content={"error": exc.detail, "type": "FormatError"},
    )


async def unprocessable_handler(request: Request, exc: ProtoOccError):
    logger.error(f"{type(exc).__name__}: {exc.detail}")
    return JSONResponse(
        status_code=HTTP_422_UNPROCESSABLE_ENTITY,
        content={"error": exc.detail, "type": type(exc).__name__},
    )


async def training_error_handler(request: Request, exc: TrainingError):
    logger.error(f"Training error in {exc.component or 'unknown'}: {exc.detail}")
    return JSONResponse(
        status_code=HTTP_500_INTERNAL_SERVER_ERROR,
        content={"error": exc.detail, "component": exc.component},
    )


async def request_validation_exception_handler(
    request: Request, exc: RequestValidationError
):
    logger.error(f"Request validation error: {exc.errors()}")
    return JSONResponse(
        status_code=HTTP_400_BAD_REQUEST,
        content={"error": "Invalid request", "details": jsonable_encoder(exc.errors())},
    )


def register_exception_handlers(app):
    app.add_exception_handler(PydanticValidationError, validation_error_handler)
    app.add_exception_handler(ValidationError, protoocc_validation_handler)
    app.add_exception_handler(FormatError, format_error_handler)
    app.add_exception_handler(EvaluationError, unprocessable_handler)
    app.add_exception_handler(GenerationError, unprocessable_handler)
    app.add_exception_handler(TrainingError, training_error_handler)
    app.add_exception_handler(
        RequestValidationError, request_validation_exception_handler
    )
