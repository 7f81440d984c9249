"""
Module: api.scenes
------------------

Scene preview endpoint.

Endpoints:
- POST /api/scenes/preview
    Generates one synthetic scene from a SceneConfig and a seed and returns
    its per-class voxel counts and the placed primitives. Nothing is written
    to disk; ``gen-scenes`` is the way to build a scene directory.
"""

import logging

from fastapi import APIRouter

from app.schemas.scene import ScenePreviewRequest, ScenePreviewResponse
from app.services.scene_service import generate_scene

logger = logging.getLogger(__name__)

router = APIRouter(tags=["Scenes"])


@router.post("/preview", response_model=ScenePreviewResponse)
def preview_scene(request: ScenePreviewRequest):
    scene = generate_scene(request.scene, request.seed)
    logger.info(f"Previewed scene seed={request.seed} with {len(scene.objects)} objects")
    return ScenePreviewResponse(
        seed=scene.seed,
        grid=scene.grid,
        occupied=int((scene.occupancy > 0).sum()),
        class_counts=scene.class_counts(),
        objects=[p.to_schema() for p in scene.objects],
    )
