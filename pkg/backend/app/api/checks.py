"""
Module: api.checks
------------------

Runs the verification suites over HTTP.

Endpoints:
- GET /api/checks/gradcheck?op=name&instances=n
- GET /api/checks/oracle?op=name&instances=n

Without ``op`` the whole suite runs. An unknown ``op`` is answered with 400
and the closest registered name. ``instances`` defaults to the configured
suite size.
"""

from typing import Optional

from fastapi import APIRouter, Query

from app.schemas.metrics import CheckSuiteReport
from app.services.check_service import run_suite

router = APIRouter(tags=["Checks"])


@router.get("/gradcheck", response_model=CheckSuiteReport)
def gradient_suite(
    op: Optional[str] = Query(None, description="Run only this check"),
    instances: Optional[int] = Query(None, ge=1, le=1000),
):
    return run_suite("gradient", op, instances)


@router.get("/oracle", response_model=CheckSuiteReport)
def oracle_suite(
    op: Optional[str] = Query(None, description="Run only this check"),
    instances: Optional[int] = Query(None, ge=1, le=10000),
):
    return run_suite("oracle", op, instances)
