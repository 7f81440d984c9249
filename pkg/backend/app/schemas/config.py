"""
Module: schemas.config
----------------------

Pydantic models for the experiment configuration. ``ExperimentConfig`` is the
single JSON document that fixes every hyperparameter of a run: the synthetic
scene generator, the camera rig, the renderer, prototype clustering, the
model, the augmentation plan, the loss weights and the optimizer.

Every model forbids unknown keys, so a typo in a config file fails loudly.
Cross-field rules are checked in ``ExperimentConfig``'s model validator.
"""

import json
import math
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

Axis = Literal["x", "y", "z"]
Triple = Tuple[int, int, int]
AXIS_INDEX = {"x": 0, "y": 1, "z": 2}


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


# --------------------------
# Scene, rig and renderer
# --------------------------


class SceneConfig(StrictModel):
    grid: Triple = Field((32, 32, 8), description="Occupancy grid H × W × Z")
    num_classes: int = Field(5, description="L, including the free class 0")
    world_min: Tuple[float, float, float] = (-8.0, -8.0, 0.0)
    world_max: Tuple[float, float, float] = (8.0, 8.0, 4.0)
    min_objects: int = 2
    max_objects: int = 4
    num_objects: Optional[int] = Field(None, description="Fixed object count")
    object_types: List[Literal["box", "sphere"]] = ["box", "sphere"]
    distinct_classes: bool = False
    allow_empty: bool = False
    max_retries: int = 50
    box_half_extent: Tuple[float, float] = (0.75, 2.5)
    box_height: Tuple[float, float] = (1.0, 3.5)
    sphere_radius: Tuple[float, float] = (0.75, 1.75)

    @model_validator(mode="after")
    def _check(self) -> "SceneConfig":
        if min(self.grid) < 8:
            raise ValueError(f"grid extents must be >= 8 per axis, got {self.grid}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if any(hi <= lo for lo, hi in zip(self.world_min, self.world_max)):
            raise ValueError("world bounds are degenerate")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("need 0 <= min_objects <= max_objects")
        counts = [self.min_objects] if self.num_objects is None else [self.num_objects]
        if self.num_objects is not None and not 0 <= self.num_objects <= self.max_objects:
            raise ValueError("num_objects must lie in [0, max_objects]")
        if min(counts) == 0 and not self.allow_empty:
            raise ValueError("an object count of 0 requires allow_empty")
        if not self.object_types:
            raise ValueError("object_types must not be empty")
        if self.max_retries < 1:
            raise ValueError("max_retries must be >= 1")
        return self


class RigConfig(StrictModel):
    n_cameras: int = 2
    image_size: Tuple[int, int] = Field((16, 24), description="h_img × w_img")
    fov_deg: float = Field(70.0, description="Horizontal field of view")
    distance: float = 14.0
    height: float = 6.0
    target: Tuple[float, float, float] = (0.0, 0.0, 1.0)
    azimuth_offset_deg: float = 0.0
    far: float = Field(40.0, description="Depth that normalizes the depth channel")

    @field_validator("n_cameras")
    @classmethod
    def _positive_cameras(cls, value: int) -> int:
        if value < 1:
            raise ValueError("n_cameras must be >= 1")
        return value

    @field_validator("fov_deg")
    @classmethod
    def _fov(cls, value: float) -> float:
        if not 0 < value < 180:
            raise ValueError("fov_deg must lie in (0, 180)")
        return value


class RenderConfig(StrictModel):
    noise_sigma: float = 0.1
    embed_scale: float = 1.0


# --------------------------
# Clustering
# --------------------------


class ClusteringConfig(StrictModel):
    r: int = Field(4, description="Prototype grid downsampling ratio")
    proto_iters: int = 6
    assign_tau: float = 0.07
    mask_generator: Literal["ground-truth", "grid-kmeans"] = "ground-truth"
    s_target: int = 16
    grid_cell: Optional[Tuple[int, int]] = Field(
        None, description="h′ × w′; defaults to the feature-map resolution"
    )

    @model_validator(mode="after")
    def _check(self) -> "ClusteringConfig":
        if self.r < 1 or self.proto_iters < 0 or self.assign_tau <= 0:
            raise ValueError("need r >= 1, proto_iters >= 0 and assign_tau > 0")
        if self.s_target < 1:
            raise ValueError("s_target must be >= 1")
        if self.grid_cell is not None and min(self.grid_cell) < 1:
            raise ValueError("grid_cell extents must be positive")
        return self


# --------------------------
# Model
# --------------------------


class DecoderStage(StrictModel):
    kernel: Triple
    stride: Triple
    out_channels: Optional[int] = None


def _default_stages() -> List[DecoderStage]:
    return [
        DecoderStage(kernel=(2, 2, 2), stride=(2, 2, 2)),
        DecoderStage(kernel=(2, 2, 1), stride=(2, 2, 1)),
        DecoderStage(kernel=(1, 1, 1), stride=(1, 1, 1)),
    ]


class ModelConfig(StrictModel):
    query_grid: Triple = Field((8, 8, 4), description="Voxel query grid h × w × z")
    d: int = 32
    encoder_layers: int = 3
    n_points: int = 4
    offset_scale: float = Field(1.0, description="Sampling offset unit, in pixels")
    eps: float = 1e-6
    proto_mapping: bool = True
    proto_optimization: bool = True
    mod: bool = True
    decoder_stages: List[DecoderStage] = Field(default_factory=_default_stages)

    @model_validator(mode="after")
    def _check(self) -> "ModelConfig":
        if self.d < 1 or self.encoder_layers < 0 or self.n_points < 1:
            raise ValueError("need d >= 1, encoder_layers >= 0 and n_points >= 1")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")
        if self.proto_optimization and not self.proto_mapping:
            raise ValueError("proto_optimization requires proto_mapping")
        if not self.decoder_stages:
            raise ValueError("at least one decoder stage is required")
        for stage in self.decoder_stages:
            if min(stage.stride) < 1 or min(stage.kernel) < 1:
                raise ValueError("decoder kernel and stride must be >= 1")
        return self

    def upsampled_extent(self) -> Triple:
        extent = list(self.query_grid)
        for stage in self.decoder_stages:
            extent = [(e - 1) * s + k for e, s, k in zip(extent, stage.stride, stage.kernel)]
        return tuple(extent)


# --------------------------
# Augmentation
# --------------------------


class AugmentationSpec(StrictModel):
    kind: Literal["random_dropout", "gaussian_noise", "transpose", "flip"]
    p: float = Field(0.1, description="Dropout probability")
    sigma: float = Field(0.05, description="Noise std, relative to the feature std")
    axes: List[Axis] = ["x", "y"]

    @model_validator(mode="after")
    def _check(self) -> "AugmentationSpec":
        if not 0 <= self.p < 1:
            raise ValueError("dropout p must lie in [0, 1)")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if len(set(self.axes)) != len(self.axes):
            raise ValueError("axes must be unique")
        if self.kind == "transpose" and len(self.axes) != 2:
            raise ValueError("transpose needs exactly two axes")
        if self.kind == "flip" and not self.axes:
            raise ValueError("flip needs at least one axis")
        return self

    @property
    def category(self) -> str:
        return "feature" if self.kind in ("random_dropout", "gaussian_noise") else "spatial"

    @property
    def label(self) -> str:
        if self.category == "spatial":
            return f"{self.kind}({''.join(self.axes)})"
        return self.kind


def _default_branches() -> List[List[AugmentationSpec]]:
    return [
        [],
        [AugmentationSpec(kind="random_dropout")],
        [AugmentationSpec(kind="gaussian_noise")],
    ]


class AugmentationPlan(StrictModel):
    branches: List[List[AugmentationSpec]] = Field(default_factory=_default_branches)

    @model_validator(mode="after")
    def _check(self) -> "AugmentationPlan":
        if not self.branches or self.branches[0]:
            raise ValueError("branch 0 must be the identity (an empty augmentation list)")
        for i, branch in enumerate(self.branches):
            if len(branch) > 2:
                raise ValueError(f"branch {i}: at most two augmentations may be combined")
        return self

    @property
    def P(self) -> int:
        return len(self.branches) - 1


# --------------------------
# Losses and optimization
# --------------------------


class LossWeights(StrictModel):
    lambda1: float = Field(10.0, ge=0, description="Occupancy cross-entropy")
    lambda2: float = Field(1.0, ge=0, description="Lovász-softmax")
    lambda3: float = Field(1.0, ge=0, description="Prototype contrastive")
    lambda4: float = Field(1.0, ge=0, description="Consistency regularization")


class LossConfig(StrictModel):
    weights: LossWeights = Field(default_factory=LossWeights)
    tau_cls: float = Field(0.3, gt=0)
    tau_cons: float = Field(0.3, gt=0)
    class_weights: Optional[List[float]] = None


class OptimizerConfig(StrictModel):
    lr: float = Field(2e-3, gt=0)
    weight_decay: float = Field(0.01, ge=0)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    schedule: Literal["cosine", "constant"] = "cosine"
    min_lr_ratio: float = Field(0.01, ge=0, le=1)
    grad_clip: float = Field(5.0, ge=0)
    batch_size: int = Field(1, ge=1)


# --------------------------
# Experiment
# --------------------------


class ExperimentConfig(StrictModel):
    scene: SceneConfig = Field(default_factory=SceneConfig)
    rig: RigConfig = Field(default_factory=RigConfig)
    render: RenderConfig = Field(default_factory=RenderConfig)
    clustering: ClusteringConfig = Field(default_factory=ClusteringConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    augmentation: AugmentationPlan = Field(default_factory=AugmentationPlan)
    loss: LossConfig = Field(default_factory=LossConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    epochs: int = Field(4, ge=0)
    train_scenes: int = Field(200, ge=1)
    val_scenes: int = Field(40, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "ExperimentConfig":
        if self.model.d < self.scene.num_classes + 1:
            raise ValueError("model.d must be >= scene.num_classes + 1")
        if self.model.upsampled_extent() != tuple(self.scene.grid):
            raise ValueError(
                f"decoder stages map {self.model.query_grid} to "
                f"{self.model.upsampled_extent()}, expected {tuple(self.scene.grid)}"
            )
        weights = self.loss.class_weights
        if weights is not None and len(weights) != self.scene.num_classes:
            raise ValueError("loss.class_weights needs one entry per class")
        for i, branch in enumerate(self.augmentation.branches):
            for spec in branch:
                if spec.kind == "transpose":
                    self._check_transpose(i, spec.axes)
        return self

    def _check_transpose(self, branch: int, axes: List[str]) -> None:
        a, b = (AXIS_INDEX[axis] for axis in axes)
        extents = [self.model.query_grid] + [
            (s.kernel, s.stride) for s in self.model.decoder_stages
        ]
        if self.model.query_grid[a] != self.model.query_grid[b]:
            raise ValueError(f"branch {branch}: transpose{tuple(axes)} needs equal query extents")
        for kernel, stride in extents[1:]:
            if kernel[a] != kernel[b] or stride[a] != stride[b]:
                raise ValueError(
                    f"branch {branch}: transpose{tuple(axes)} needs symmetric decoder stages"
                )

    # --------------------------
    # Derived quantities
    # --------------------------

    @property
    def num_prototypes(self) -> int:
        """M, the 2D prototypes per view for the prototype grid ratio r."""
        h, w = self.rig.image_size
        r = self.clustering.r
        return math.ceil(h / r) * math.ceil(w / r)

    @property
    def grid_cell(self) -> Tuple[int, int]:
        return tuple(self.clustering.grid_cell or self.rig.image_size)

    @property
    def active_plan(self) -> AugmentationPlan:
        """The plan actually decoded during training; identity only without MOD."""
        return self.augmentation if self.model.mod else AugmentationPlan(branches=[[]])

    # --------------------------
    # JSON persistence
    # --------------------------

    def to_json(self, indent: Optional[int] = 2) -> str:
        return self.model_dump_json(indent=indent)

    @classmethod
    def from_json(cls, text: Union[str, bytes]) -> "ExperimentConfig":
        return cls.model_validate_json(text)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. {"model.mod": False}."""
        data = json.loads(self.to_json(indent=None))
        for dotted, value in overrides.items():
            node = data
            keys = dotted.split(".")
            for key in keys[:-1]:
                if key not in node or not isinstance(node[key], dict):
                    raise ValueError(f"unknown config path {dotted!r}")
                node = node[key]
            if keys[-1] not in node:
                raise ValueError(f"unknown config path {dotted!r}")
            node[keys[-1]] = value
        return ExperimentConfig.model_validate(data)
