"""
Module: api.experiments
-----------------------

Read-only experiment endpoints.

Endpoints:
- POST /api/experiments/evaluate
    Evaluates a POCC checkpoint on a directory of POSC scenes with branch-0
    decoding and returns mIoU, geometric IoU and per-class IoU.
- GET /api/experiments/presets
    Lists the ablation presets with their row names.

Paths are resolved on the server. Missing files answer 404, corrupt files
400 and a scene set that does not fit the checkpoint 400 naming the field.
"""

import logging
from typing import Dict, List

from fastapi import APIRouter, HTTPException

from app.schemas.metrics import EvaluateRequest, EvaluationResult
from app.services.ablation_service import PRESETS
from app.services.checkpoint_service import load_checkpoint
from app.services.scene_service import load_scene_set
from app.services.training_service import evaluate

logger = logging.getLogger(__name__)

router = APIRouter(tags=["Experiments"])


@router.post("/evaluate", response_model=EvaluationResult)
def evaluate_checkpoint(request: EvaluateRequest):
    try:
        checkpoint = load_checkpoint(request.checkpoint)
        scenes = load_scene_set(request.scenes)
    except FileNotFoundError as e:
        raise HTTPException(status_code=404, detail=str(e))
    if not scenes:
        raise HTTPException(status_code=404, detail=f"No scenes found in {request.scenes}")
    return evaluate(checkpoint, scenes)


@router.get("/presets")
def list_presets() -> Dict[str, List[str]]:
    return {name: [row.name for row in build()] for name, build in PRESETS.items()}
