from typing import Dict, List, Literal, Tuple

from pydantic import BaseModel, Field

from app.schemas.config import SceneConfig

# --------------------------
# Camera rig
# --------------------------


class CameraSchema(BaseModel):
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: List[List[float]]  # world-to-camera, 3×3
    translation: List[float]  # world-to-camera, 3
    image_size: Tuple[int, int]  # h_img, w_img


class RigSchema(BaseModel):
    cameras: List[CameraSchema]


# --------------------------
# Placed primitives
# --------------------------


class PrimitiveSchema(BaseModel):
    type: Literal["box", "sphere"]
    class_id: int
    center: Tuple[float, float, float]
    extent: Tuple[float, float, float]  # box half extents; sphere radius ×3
    yaw: float = 0.0


class SceneDocument(BaseModel):
    """JSON block embedded in a POSC scene file after the label bytes."""

    rig: RigSchema
    objects: List[PrimitiveSchema] = []
    seed: int
    world_min: Tuple[float, float, float]
    world_max: Tuple[float, float, float]


# --------------------------
# Preview Request/Response
# --------------------------


class ScenePreviewRequest(BaseModel):
    scene: SceneConfig = Field(default_factory=SceneConfig)
    seed: int = 0


class ScenePreviewResponse(BaseModel):
    seed: int
    grid: Tuple[int, int, int]
    occupied: int
    class_counts: Dict[str, int]
    objects: List[PrimitiveSchema]
